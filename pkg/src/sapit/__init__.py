"""Joint detection of Tx symbols and RIS phase-encoded data in RIS-aided MIMO.

Submodules: ``core`` (constellations, RNG streams), ``channel``, ``coding``,
``frame``, ``receiver`` (bilinear message-passing detector), ``state_evolution``,
``rate_analysis``, ``oracle`` (brute-force references) and ``cli``/``experiments``.
"""
from .core import Constellation, InvalidArgument, RngStream, make_constellation
from .channel import ChannelSet, Geometry, gen_channels
from .frame import CodeContext, FrameConfig, random_frame, synthesize
from .receiver import ReceiverConfig, run
from .state_evolution import DecoderModel, SEConfig, run_se
from .rate_analysis import separate_rate, sum_rate

__version__ = "0.1.0"
