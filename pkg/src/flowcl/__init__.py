"""Continual self-consistency training for amortized Bayesian inference.

A conditional normalizing flow is pre-trained on simulations, then adapted
across sequentially arriving unlabeled tasks with self-consistency losses
combined with episodic replay and/or elastic weight consolidation. Built-in
reference posteriors and metrics quantify forgetting.
"""

from .autodiff import Tape, Tensor, backward, forward_primitive
from .continual import (ReplayBuffer, RunConfig, Task, TaskStream, kmedoid_update,
                        make_ewc_record, pam_kmedoids, pretrain_sb, run_stream,
                        train_task)
from .harness import (ExperimentConfig, build_stream, emit_plot_data, parse_config,
                      run_experiment)
from .losses import (REGIMES, EwcRecord, FlowPosterior, GaussianPosterior, ScConfig,
                     composite_loss, conjugate_posterior, ewc_penalty, fisher_diag,
                     sb_loss, sc_loss)
from .models import (Ar1Model, ConjGaussModel, LinRegModel, ProbModel,
                     analytic_posterior, load_csv_task, make_model)
from .networks import CouplingFlow, PosteriorNet, SummaryNet
from .optim import AdamState, adam_step, cosine_lr
from .params import ParamBinding, ParamVector, load_checkpoint, save_checkpoint
from .reference import (PosteriorSamples, bias_report, mmd, mmd2, mmd_ratio,
                        rwm_sample)

__version__ = "0.1.0"
