"""Membership service: identities, organizations, signatures (offline mode).

Signatures are Ed25519, which is deterministic: the same key and message
always give the same signature, so seeded runs produce identical bytes.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .core import EvovError

SIGNATURE_SCHEME = "ed25519"


class DuplicateIdentity(EvovError):
    pass


class UnknownIdentity(EvovError):
    pass


class Role(str, enum.Enum):
    CLIENT = "client"
    PEER = "peer"
    ORDERER = "orderer"


@dataclass(frozen=True)
class Identity:
    id: str
    org: str
    role: Role
    public_key: bytes


@dataclass(frozen=True, repr=False)
class SigningIdentity:
    identity: Identity
    secret_key: bytes

    @property
    def id(self) -> str:
        return self.identity.id

    def __repr__(self):
        return f"SigningIdentity({self.identity.id!r})"


def new_keypair(seed: Optional[bytes] = None) -> tuple[bytes, bytes]:
    """Return (secret, public) raw key bytes; ``seed`` is 32 bytes if given."""
    sk = Ed25519PrivateKey.from_private_bytes(seed) if seed is not None else Ed25519PrivateKey.generate()
    return sk.private_bytes_raw(), sk.public_key().public_bytes_raw()


@lru_cache(maxsize=4096)
def _private_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _public_key(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def sign_raw(secret: bytes, msg: bytes) -> bytes:
    return _private_key(secret).sign(msg)


@lru_cache(maxsize=1 << 16)
def verify_raw(public: bytes, msg: bytes, sig: bytes) -> bool:
    # Pure function of its inputs; memoized because every peer re-checks
    # the same block contents.
    try:
        _public_key(public).verify(sig, msg)
    except (InvalidSignature, ValueError):
        return False
    return True


def sign(si: SigningIdentity, msg: bytes) -> bytes:
    return sign_raw(si.secret_key, msg)


@dataclass
class MspDirectory:
    """All identities known to the network, partitioned by organization.

    Populated once at bootstrap, then frozen.
    """

    identities: dict[str, Identity] = field(default_factory=dict)
    orgs: set[str] = field(default_factory=set)
    frozen: bool = False

    def add(self, ident: Identity) -> None:
        if self.frozen:
            raise EvovError("directory is frozen")
        if ident.id in self.identities:
            raise DuplicateIdentity(ident.id)
        self.identities[ident.id] = ident
        self.orgs.add(ident.org)

    def generate_identity(self, id: str, org: str, role: Role,
                          rng: Optional[random.Random] = None) -> SigningIdentity:
        if id in self.identities:
            raise DuplicateIdentity(id)
        seed = rng.randbytes(32) if rng is not None else None
        secret, public = new_keypair(seed)
        ident = Identity(id, org, Role(role), public)
        self.add(ident)
        return SigningIdentity(ident, secret)

    def freeze(self) -> "MspDirectory":
        self.frozen = True
        return self

    def lookup(self, id: str) -> Identity:
        try:
            return self.identities[id]
        except KeyError:
            raise UnknownIdentity(id) from None

    def get(self, id: str) -> Optional[Identity]:
        return self.identities.get(id)

    def verify(self, id: str | Identity, msg: bytes, sig: bytes) -> bool:
        ident = self.lookup(id) if isinstance(id, str) else id
        if self.identities.get(ident.id) != ident:
            raise UnknownIdentity(ident.id)
        return verify_raw(ident.public_key, msg, sig)

    def is_member(self, id: str, org: str) -> bool:
        ident = self.identities.get(id)
        return ident is not None and ident.org == org

    def members(self, org: str, role: Optional[Role] = None) -> list[Identity]:
        return sorted(
            (i for i in self.identities.values() if i.org == org and (role is None or i.role == role)),
            key=lambda i: i.id,
        )

    def by_role(self, role: Role) -> list[Identity]:
        return sorted((i for i in self.identities.values() if i.role == role), key=lambda i: i.id)

    def to_config(self) -> list[dict]:
        return [
            {"id": i.id, "org": i.org, "role": i.role.value, "public_key": i.public_key.hex()}
            for i in sorted(self.identities.values(), key=lambda i: i.id)
        ]

    @classmethod
    def from_config(cls, roster: Iterable[dict]) -> "MspDirectory":
        d = cls()
        for ent in roster:
            d.add(Identity(ent["id"], ent["org"], Role(ent["role"]), bytes.fromhex(ent["public_key"])))
        return d.freeze()


def verify(directory: MspDirectory, ident: Identity | str, msg: bytes, sig: bytes) -> bool:
    return directory.verify(ident, msg, sig)
