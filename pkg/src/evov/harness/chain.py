"""Channel bootstrap shared by the simulator, the verifier and the fabcoin CLI."""

from __future__ import annotations

import random
from typing import Callable, Optional

from ..chaincode import ChaincodeDefinition, SimContext
from ..core import Block
from ..fabcoin import CHAINCODE_ID as FABCOIN, VSCC_ID as FABCOIN_VSCC, fabcoin_chaincode, fabcoin_vscc
from ..order import ChannelConfig, genesis_config
from ..policy import parse_policy
from ..validate import ChannelContext, VsccRegistry

NONDET = "nondet"

VSCC_PLUGINS = {FABCOIN_VSCC: fabcoin_vscc}


def vscc_registry() -> VsccRegistry:
    reg = VsccRegistry()
    for name, fn in VSCC_PLUGINS.items():
        reg.register(name, fn)
    return reg


def nondet_chaincode(entropy: random.Random) -> Callable:
    """Chaincode writing a value drawn from the executing peer's own entropy."""
    def handler(ctx: SimContext, operation: str, args: tuple) -> bytes:
        key = args[0].decode() if args else "k"
        ctx.put_state(key, entropy.randbytes(8))
        return b"ok"
    return handler


def handler_for(chaincode_id: str, entropy: Optional[random.Random] = None) -> Optional[Callable]:
    if chaincode_id == FABCOIN:
        return fabcoin_chaincode
    if chaincode_id == NONDET:
        return nondet_chaincode(entropy or random.Random())
    return None


def definitions(cfg: ChannelConfig, entropy: Optional[random.Random] = None,
                with_handlers: bool = False) -> dict[str, ChaincodeDefinition]:
    out = {}
    for cc in cfg.chaincodes:
        handler = handler_for(cc["id"], entropy) if with_handlers else None
        out[cc["id"]] = ChaincodeDefinition(cc["id"], handler, parse_policy(cc["policy"]),
                                            cc.get("vscc", "default"))
    return out


def context_from_genesis(genesis: Block) -> ChannelContext:
    """Everything needed to validate the channel, rebuilt from block 0 alone."""
    cfg = genesis_config(genesis)
    return ChannelContext(cfg.channel_id, cfg.msp(), definitions(cfg), vscc_registry(), cfg.params)
