"""The trainable parser: model, training loops, checkpoints and gradient checks."""
from .model import DecoderState, PolicyConfig, PolicyModel, Rollout, StepLimitExceeded
from .train import (
    Adam, BaselineState, RLConfig, SGDMomentum, TrainConfig, expected_reward, policy_gradient,
    reinforce_step, sequence_log_prob, supervised_loss, teacher_forced_accuracy, train_rl,
    train_supervised,
)
from .checkpoint import VocabularyMismatch, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, toy_problem, toy_vocabulary
