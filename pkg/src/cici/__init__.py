"""Test-time adaptation for camera-based pulse estimation, on a small numpy autograd engine."""

from .autograd import Tensor, backward, finite_diff_check
from .dsp import peak_hr_bpm, psd, soft_peak_bpm
from .estimator import CiCiAdapter
from .harness import MODES, RunConfig, run_suite, run_tta
from .model import BvpNetMini

__all__ = ["Tensor", "backward", "finite_diff_check", "psd", "peak_hr_bpm", "soft_peak_bpm",
           "CiCiAdapter", "MODES", "RunConfig", "run_tta", "run_suite", "BvpNetMini"]
__version__ = "0.1.0"
