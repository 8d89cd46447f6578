"""Masked-modeling transformer that denoises and infills pose sequences."""

from .errors import *  # noqa: F401,F403
from .model import PoseBertConfig, PoseBertModel, FrameMask, init_model
from .skeleton import Pose, Skeleton, default_skeleton, forward_kinematics
from .training import TrainConfig, train, save_checkpoint, load_checkpoint

__version__ = "0.1.0"
