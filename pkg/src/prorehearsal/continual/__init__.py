"""Task-incremental training with rehearsal buffers and continual-learning baselines."""

from .buffer import PROVENANCES, BufferError, RehearsalBuffer, TaskEntries, balanced_quota
from .strategies import (REHEARSAL_KINDS, STRATEGY_KINDS, EwcState, ProgressiveNet, SiState,
                         StrategyConfig, StrategyError, empirical_fisher, ewc_penalty,
                         noise_augment, si_penalty, strategy_ewc, strategy_gem, strategy_pnn,
                         strategy_si)
from .training import (JOINT_MODES, BalancedSampler, FitHistory, JointLog, Source, TaskData,
                       TrainConfig, TrainingError, TrainLog, build_prospective_rehearsal,
                       eligible_steps, evaluate, fit, original_entries, prepare_task,
                       prepare_tasks, rehearsal_entries, selection_order, train_joint,
                       train_prospective,
                       train_prospective_models, train_task_incremental, transition_pairs,
                       update_buffer)

__all__ = [name for name in dir() if not name.startswith("_")]
