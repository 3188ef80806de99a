"""Reward-aware consistency trajectory distillation for offline planning."""
from .ndgrad import NetworkParams, Tape, Var
from .oracle import GaussianMixture, OracleDenoiser
from .schedule import NoiseSchedule, Preconditioner, karras_sigmas
from .student import StudentModel, train_student
from .teacher import TeacherModel, train_teacher

__version__ = "0.1.0"
