"""Differentiable time-evolving radio-field synthesis.

Explicit Gaussian primitives carrying anisotropic spherical Gaussian
directional lobes and Gaussian temporal envelopes are splatted onto a
receiver-centered sphere, composited in the complex domain, and fitted to
angular power spectrograms by analytic gradient descent, including a
gradient-driven birth-and-death mechanism for transient multipath events.
"""

from .backward import GradientBuffer, backward, finite_difference_check
from .dataset import (Dataset, ObservationSample, SynthSpec, generate_dataset,
                      load_dataset, save_dataset, split, synth_scene)
from .geometry import (AngularCoord, ProjectedGaussian, TangentFrame,
                       asg_weight, compensate_covariance, coverage_radius,
                       project_covariance, projection_jacobian,
                       spherical_coords, tangent_frame)
from .losses import LossReport, gate_entropy, loss_recon, loss_td, total_loss
from .metrics import MetricsSummary, evaluate, stratify_by_dynamics
from .optim import AdamState, adam_step, project_constraints
from .renderer import (AngularGrid, AngularSpectrogram, RenderOutput,
                       composite_bin, depth_sort, normalize_spectrogram,
                       opacity, project_primitives, render, render_reference,
                       rss_from_spectrogram)
from .scene import (AsgLobe, GaussianPrimitive, Kind, Scene, TemporalEnvelope,
                    center_at, covariance_of, directional_response, is_active,
                    temporal_amplitude)
from .training import (TrainConfig, accumulate_birth_score, birth_transients,
                       prune_transients, train)

__version__ = "0.1.0"
