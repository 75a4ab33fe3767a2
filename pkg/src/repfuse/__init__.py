"""Multi-branch re-parameterizable conv nets: branch search under a budget and lossless fusion."""

from .blocks import BranchKind, RepBlock, RepNet, block_forward, build_block, build_network
from .fusion import FusedNetwork, fuse_block, fuse_network, verify_equivalence
from .search import ArchState, SearchConfig, finalize_architecture, rank_and_select, search_step
from .tensor import GradTape, Tensor, backward

__all__ = [
    "ArchState", "BranchKind", "FusedNetwork", "GradTape", "RepBlock", "RepNet", "SearchConfig", "Tensor",
    "backward", "block_forward", "build_block", "build_network", "finalize_architecture", "fuse_block",
    "fuse_network", "rank_and_select", "search_step", "verify_equivalence",
]

__version__ = "0.1.0"
