"""PatchMatch multi-view stereo with learned, policy-gradient-trained scoring."""

from .estimator import PatchMatchMVS

__all__ = ["PatchMatchMVS"]
