"""Soft data association multi-object tracking laboratory.

A desk-scale stack for studying attention-based measurement encoding and
soft data association on simulated bouncing-particle worlds: a minimal
reverse-mode autodiff engine, the association model with a learned occlusion
state, greedy and assignment-based trackers, motion/appearance baselines,
and CLEAR MOT evaluation.
"""

from .autodiff import Tensor, backward, no_grad, parameter, tensor, SgdOptimizer
from .data import BoundingBox, Detection, Sequence, load_sequence, save_sequence
from .simulate import DropConfig, SimConfig, apply_drop_noise, generate_sequence
from .model import (ModelConfig, ModelParams, association_distribution,
                    encode_sequence)
from .tracking import (TrackerConfig, TrackerOutput, build_training_targets,
                       run_association_tracker)
from .baselines import (BaselineGates, SimilarityNet, contrastive_loss,
                        run_baseline_tracker)
from .assignment import FORBIDDEN_COST, box_iou_matrix, iou, solve_min_cost_assignment
from .metrics import MotReport, OcclusionReport, evaluate, evaluate_many, occlusion_report
from .train import TrainConfig, train_association_model, train_similarity_model
from .experiments import ExperimentConfig, generate_dataset, load_split, run_method

__version__ = "0.1.0"
