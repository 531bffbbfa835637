"""Rolling blockchain toolkit: bounded-memory chains, round-robin consensus,
and network resilience experiments, served over HTTP or driven from the CLI."""

__version__ = "0.1.0"

from .chain import (
    Block,
    BlockHeader,
    FullChain,
    LocalChain,
    Transaction,
    assemble_full_chain,
    hash_block,
    make_block,
    make_genesis,
    validate_chain,
)

__all__ = [
    "__version__",
    "Block",
    "BlockHeader",
    "FullChain",
    "LocalChain",
    "Transaction",
    "assemble_full_chain",
    "hash_block",
    "make_block",
    "make_genesis",
    "validate_chain",
]
