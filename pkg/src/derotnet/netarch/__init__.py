"""Network assembly, training samples and the staged training schema."""
from derotnet.netarch.model import GROUPS, JointOutput, NetworkConfig, RotationAwareNet, frozen
from derotnet.netarch.samples import (
    BalancedSampler, PatchSource, SamplePool, TrainingSample, augment, extract_patch,
    sample_minibatch,
)
from derotnet.netarch.training import (
    AugmentedPositives, LogRecord, Stage, StagePlan, StageSpec, mine_hard_negatives, run_stage,
    score_samples,
)
