"""Execution phase: proposals, endorsement (default ESCC) and transaction assembly."""

from __future__ import annotations

import enum
import os
import random
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .chaincode import ChaincodeRegistry, invoke_simulation
from .core import (
    Endorsement,
    EvovError,
    Proposal,
    Transaction,
    TxType,
    derive_txid,
    endorsement_message,
)
from .ledger import StateView
from .msp import MspDirectory, Role, SigningIdentity, sign
from .policy import (  # noqa: F401  (re-exported)
    AND,
    OR,
    OUTOF,
    OutOf,
    Policy,
    Principal,
    eval_policy,
    minimal_sets,
    names_endorser,
    parse_policy,
)

NONCE_SIZE = 24
NONCE_CACHE = 10_000


class BadClientSignature(EvovError):
    pass


class NotAnEndorser(EvovError):
    pass


class ReplayedNonce(EvovError):
    pass


class PolicyUnsatisfied(EvovError):
    pass


class Status(enum.Enum):
    OK = "ok"
    FAILED = "failed"


@dataclass(frozen=True)
class ProposalResponse:
    endorsement: Optional[Endorsement]
    status: Status
    error: str = ""


def build_proposal(client: SigningIdentity, channel: str, chaincode_id: str, operation: str,
                   args: Sequence[bytes] = (), *, nonce: Optional[bytes] = None,
                   rng: Optional[random.Random] = None) -> Proposal:
    if nonce is None:
        nonce = rng.randbytes(NONCE_SIZE) if rng is not None else os.urandom(NONCE_SIZE)
    tx_id = derive_txid(client.id, nonce)
    unsigned = Proposal(channel, client.id, chaincode_id, operation, tuple(args), nonce, tx_id)
    return Proposal(channel, client.id, chaincode_id, operation, tuple(args), nonce, tx_id,
                    sign(client, unsigned.signed_bytes()))


def check_proposal(msp: MspDirectory, p: Proposal) -> bool:
    """Client identity known, tx_id derived correctly, signature valid."""
    ident = msp.get(p.client_id)
    if ident is None or not p.nonce:
        return False
    if derive_txid(p.client_id, p.nonce) != p.tx_id:
        return False
    return msp.verify(ident, p.signed_bytes(), p.client_sig)


class Endorser:
    """Endorsing side of a peer: simulate, then sign the result (default ESCC)."""

    def __init__(self, signer: SigningIdentity, msp: MspDirectory, registry: ChaincodeRegistry,
                 snapshot: Callable[[str], StateView], *, nonce_cache: int = NONCE_CACHE,
                 max_steps: Optional[int] = 1_000_000, deadline: Optional[float] = 5.0):
        self.signer = signer
        self.msp = msp
        self.registry = registry
        self.snapshot = snapshot
        self.nonce_cache = nonce_cache
        self.max_steps = max_steps
        self.deadline = deadline
        self._seen: dict[str, OrderedDict] = {}

    def _remember_nonce(self, client: str, nonce: bytes) -> None:
        seen = self._seen.setdefault(client, OrderedDict())
        if nonce in seen:
            raise ReplayedNonce(f"nonce from {client} already seen")
        seen[nonce] = None
        while len(seen) > self.nonce_cache:
            seen.popitem(last=False)

    def endorse(self, proposal: Proposal) -> ProposalResponse:
        defn = self.registry.get(proposal.channel_id, proposal.chaincode_id)
        if not names_endorser(defn.policy, self.signer.identity):
            raise NotAnEndorser(f"{self.signer.id} not in policy of {defn.chaincode_id}")
        if not check_proposal(self.msp, proposal):
            raise BadClientSignature(proposal.client_id)
        self._remember_nonce(proposal.client_id, proposal.nonce)
        response, rwset = invoke_simulation(
            defn, proposal.operation, proposal.args, self.snapshot(proposal.channel_id),
            proposal=proposal, registry=self.registry, channel=proposal.channel_id,
            max_steps=self.max_steps, deadline=self.deadline)
        sig = sign(self.signer, endorsement_message(proposal.tx_id, rwset, response))
        return ProposalResponse(Endorsement(proposal.tx_id, self.signer.id, rwset, response, sig), Status.OK)


def endorse_proposal(endorser: Endorser, proposal: Proposal) -> ProposalResponse:
    return endorser.endorse(proposal)


def collect_and_assemble(proposal: Proposal, responses: Iterable[ProposalResponse], policy: Policy,
                         msp: MspDirectory) -> Transaction:
    """Group valid endorsements by identical rwset and build a transaction.

    The chosen group is the largest one whose endorsers satisfy ``policy``;
    ties go to the lexicographically smallest rwset hash.
    """
    groups: dict[bytes, dict[str, Endorsement]] = {}
    for r in responses:
        e = r.endorsement
        if r.status != Status.OK or e is None or e.tx_id != proposal.tx_id:
            continue
        ident = msp.get(e.endorser_id)
        if ident is None or ident.role != Role.PEER:
            continue
        if not msp.verify(ident, e.signed_bytes(), e.signature):
            continue
        groups.setdefault(e.rwset.digest, {})[e.endorser_id] = e
    ranked = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    for _, ends in ranked:
        idents = [msp.lookup(i) for i in ends]
        if eval_policy(policy, idents):
            chosen = tuple(ends[i] for i in sorted(ends))
            return Transaction(TxType.NORMAL, proposal, chosen[0].rwset, chosen)
    if len(groups) > 1:
        raise PolicyUnsatisfied("endorsers returned divergent read-write sets")
    raise PolicyUnsatisfied("endorsement set does not satisfy the policy")
