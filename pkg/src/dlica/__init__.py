"""ReLU value networks, MIP winner determination and the PVM auction."""

__version__ = "0.1.0"

from .domains import DomainInstance, efficient_allocation, gen_global_synergy, gen_local_synergy, true_value
from .mechanism import BidSet, ElicitConfig, PvmResult, elicit, pvm, reported_welfare
from .mip import BigMPolicy, MipModel, encode_wdp, export_lp, import_lp
from .nn import Architecture, TrainConfig, ValueNetwork, forward, train
from .solver import SolveResult, solve_lp, solve_mip

__all__ = [
    "Architecture", "BidSet", "BigMPolicy", "DomainInstance", "ElicitConfig", "MipModel", "PvmResult",
    "SolveResult", "TrainConfig", "ValueNetwork", "efficient_allocation", "elicit", "encode_wdp",
    "export_lp", "forward", "gen_global_synergy", "gen_local_synergy", "import_lp", "pvm",
    "reported_welfare", "solve_lp", "solve_mip", "train", "true_value",
]
