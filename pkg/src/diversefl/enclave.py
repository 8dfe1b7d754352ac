"""Simulated trusted enclave running the per-client guided fault filter.

The untrusted orchestrator interacts with :class:`Enclave` only through sealed
blobs going in and the updated model plus per-client verdicts coming out.
Plaintext client updates and shared samples never leave this module's
private state.

Sealed blob layout (little-endian)::

    [owner u32][round u32][nonce u64][len u64][ciphertext: len bytes]

The ciphertext is ``plaintext || SHA-256("diversefl-check" || key || header)``
XORed with a PCG64 keystream whose seed is ``SHA-256(key || nonce)``. The
trailing check block makes a wrong key fail loudly. This is a simulation
stand-in for an attested AEAD channel, not a vetted cipher.
Update plaintext is ``[count u64][count x f64]``; sample plaintext is
``[rows u64][cols u64][rows*cols x f64][rows x i64 labels]``.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import nn
from .data import SampleBatch
from .errors import DuplicateProvisionError, NoSurvivorsError, SealError, UnknownClientError

TAU_ZERO = 1e-12
_HEADER = struct.Struct("<IIQQ")
_CHECK_LEN = 32


@dataclass(frozen=True)
class Thresholds:
    eps1: float = 0.0
    eps2: float = 0.5
    eps3: float = 2.0

    def __post_init__(self):
        if not self.eps2 > 0:
            raise ValueError("eps2 must be positive")
        if not self.eps2 < self.eps3:
            raise ValueError("eps2 must be below eps3")


@dataclass(frozen=True)
class SealedBlob:
    owner: int
    round: int
    nonce: int
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.owner, self.round, self.nonce, len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBlob":
        if len(raw) < _HEADER.size:
            raise SealError("blob shorter than its header")
        owner, rnd, nonce, length = _HEADER.unpack_from(raw)
        body = raw[_HEADER.size:]
        if len(body) != length:
            raise SealError(f"blob declares {length} ciphertext bytes, carries {len(body)}")
        return cls(owner, rnd, nonce, bytes(body))


@dataclass(frozen=True)
class GuidingUpdate:
    client_id: int
    round: int
    payload: np.ndarray


@dataclass(frozen=True)
class FilterDecision:
    client_id: int
    c1: float
    c2: float
    passed: bool
    failed_condition: str  # none | direction | length | both


@dataclass
class RoundOutcome:
    theta: np.ndarray
    decisions: List[FilterDecision]
    flagged: frozenset
    accepted: frozenset


def _apply_keystream(data: bytes, key: bytes, nonce: int) -> bytes:
    """XOR ``data`` with a PCG64 stream seeded by ``SHA-256(key || nonce)``."""
    digest = hashlib.sha256(key + struct.pack("<Q", nonce)).digest()
    bitgen = np.random.PCG64(np.random.SeedSequence(np.frombuffer(digest, dtype="<u4").tolist()))
    words = -(-len(data) // 8)
    padded = np.zeros(words * 8, dtype=np.uint8)
    padded[:len(data)] = np.frombuffer(data, dtype=np.uint8)
    mixed = padded.view("<u8") ^ bitgen.random_raw(words).astype("<u8")
    return mixed.view(np.uint8)[:len(data)].tobytes()


def _check_block(key: bytes, header: bytes) -> bytes:
    return hashlib.sha256(b"diversefl-check" + key + header).digest()


def seal(plaintext: bytes, key: bytes, owner: int, round_idx: int, nonce: int) -> SealedBlob:
    header = _HEADER.pack(owner, round_idx, nonce, len(plaintext) + _CHECK_LEN)
    body = plaintext + _check_block(key, header)
    return SealedBlob(owner, round_idx, nonce, _apply_keystream(body, key, nonce))


def unseal(blob: SealedBlob, key: bytes) -> bytes:
    if len(blob.ciphertext) < _CHECK_LEN:
        raise SealError("ciphertext too short to carry a key check block")
    body = _apply_keystream(blob.ciphertext, key, blob.nonce)
    plaintext, check = body[:-_CHECK_LEN], body[-_CHECK_LEN:]
    header = _HEADER.pack(blob.owner, blob.round, blob.nonce, len(blob.ciphertext))
    if not hmac.compare_digest(check, _check_block(key, header)):
        raise SealError(f"blob from client {blob.owner} does not open under the enclave's key")
    return plaintext


def encode_vector(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f8")
    return struct.pack("<Q", values.size) + values.tobytes()


def decode_vector(raw: bytes) -> np.ndarray:
    (count,) = struct.unpack_from("<Q", raw)
    if len(raw) != 8 + 8 * count:
        raise SealError("vector payload length does not match its prefix")
    return np.frombuffer(raw, dtype="<f8", offset=8).astype(np.float64)


def encode_sample(batch: SampleBatch) -> bytes:
    feats = np.ascontiguousarray(batch.features, dtype="<f8")
    labels = np.ascontiguousarray(batch.labels, dtype="<i8")
    return struct.pack("<QQ", *feats.shape) + feats.tobytes() + labels.tobytes()


def decode_sample(raw: bytes, owner: int) -> SampleBatch:
    rows, cols = struct.unpack_from("<QQ", raw)
    if len(raw) != 16 + 8 * rows * cols + 8 * rows:
        raise SealError("sample payload length does not match its shape")
    feats = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=16).reshape(rows, cols)
    labels = np.frombuffer(raw, dtype="<i8", count=rows, offset=16 + 8 * rows * cols)
    return SampleBatch(owner, feats.astype(np.float64), labels.astype(np.int64))


def derive_key(secret: int, client_id: int) -> bytes:
    # stands in for the key agreed during remote attestation
    return hashlib.sha256(struct.pack("<QQ", secret & (2**64 - 1), client_id) + b"diversefl-key").digest()


def guiding_update(
    spec: nn.ModelSpec,
    sample: SampleBatch,
    theta_prev: np.ndarray,
    lr: float,
    local_steps: int,
    l2: float = 0.0,
) -> np.ndarray:
    """``theta_prev`` minus the model after ``local_steps`` full-batch steps on the sample."""
    if local_steps < 1:
        raise ValueError("local_steps must be at least 1")
    theta = np.array(theta_prev, dtype=np.float64)
    for _ in range(local_steps):
        g = nn.loss_and_grad(spec, theta, sample.features, sample.labels, l2).gradient
        theta = nn.sgd_step(theta, g, lr)
    return np.asarray(theta_prev, dtype=np.float64) - theta


def similarity(z: np.ndarray, guide: np.ndarray, tau_zero: float = TAU_ZERO) -> Tuple[float, float]:
    """Direction sign and norm ratio of an upload against its guiding update."""
    z = np.asarray(z, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if z.shape != guide.shape:
        raise ValueError(f"length mismatch: {z.shape} vs {guide.shape}")
    c1 = float(np.sign(guide @ z))
    z_norm = float(np.linalg.norm(z))
    g_norm = float(np.linalg.norm(guide))
    if g_norm <= tau_zero:
        c2 = 1.0 if z_norm <= tau_zero else float("inf")
    else:
        c2 = z_norm / g_norm
    return c1, c2


def filter_update(
    client_id: int,
    z: np.ndarray,
    guide: np.ndarray,
    thresholds: Thresholds = Thresholds(),
    tau_zero: float = TAU_ZERO,
) -> FilterDecision:
    c1, c2 = similarity(z, guide, tau_zero)
    # tiny-vs-tiny: a converged client must not trip the sign test
    both_tiny = c2 == 1.0 and np.linalg.norm(guide) <= tau_zero
    direction_ok = both_tiny or c1 > thresholds.eps1
    length_ok = thresholds.eps2 < c2 < thresholds.eps3
    failed = {
        (True, True): "none",
        (False, True): "direction",
        (True, False): "length",
        (False, False): "both",
    }[(direction_ok, length_ok)]
    return FilterDecision(client_id, c1, c2, direction_ok and length_ok, failed)


class Enclave:
    """Holds the shared samples and keys; runs filtering and aggregation."""

    def __init__(
        self,
        spec: nn.ModelSpec,
        thresholds: Thresholds = Thresholds(),
        l2: float = 0.0,
        key_secret: int = 0,
        tau_zero: float = TAU_ZERO,
    ):
        self._spec = spec
        self._thresholds = thresholds
        self._l2 = l2
        self._secret = key_secret
        self._tau_zero = tau_zero
        self._keys: Dict[int, bytes] = {}
        self._vault: Dict[int, SampleBatch] = {}
        self._theta: Optional[np.ndarray] = None

    @property
    def thresholds(self) -> Thresholds:
        return self._thresholds

    @property
    def model(self) -> Optional[np.ndarray]:
        return None if self._theta is None else self._theta.copy()

    def establish_key(self, client_id: int) -> bytes:
        """Key agreement handshake; the returned key goes to the client only."""
        key = derive_key(self._secret, client_id)
        self._keys[client_id] = key
        return key

    def is_provisioned(self, client_id: int) -> bool:
        return client_id in self._vault

    def provisioned_clients(self) -> List[int]:
        return sorted(self._vault)

    def provision_sample(self, blob: SealedBlob) -> None:
        if blob.owner in self._vault:
            raise DuplicateProvisionError(f"client {blob.owner} already shared its sample")
        key = self._key(blob.owner)
        self._vault[blob.owner] = decode_sample(unseal(blob, key), blob.owner)

    def _key(self, client_id: int) -> bytes:
        try:
            return self._keys[client_id]
        except KeyError:
            raise UnknownClientError(f"no key established with client {client_id}") from None

    def _guiding_update(self, client_id: int, theta_prev, lr: float, local_steps: int, round_idx: int = 0) -> GuidingUpdate:
        if client_id not in self._vault:
            raise UnknownClientError(f"client {client_id} has no sample in the vault")
        payload = guiding_update(self._spec, self._vault[client_id], theta_prev, lr, local_steps, self._l2)
        return GuidingUpdate(client_id, round_idx, payload)

    def _open_updates(self, blobs: Iterable[SealedBlob]):
        updates = {}
        for blob in blobs:
            z = decode_vector(unseal(blob, self._key(blob.owner)))
            if z.size != self._spec.num_params:
                raise SealError(f"client {blob.owner} sent {z.size} values, model has {self._spec.num_params}")
            updates[blob.owner] = z
        return updates

    def _judge(self, updates, theta_prev, lr, local_steps, round_idx):
        decisions = []
        for cid in sorted(updates):
            guide = self._guiding_update(cid, theta_prev, lr, local_steps, round_idx).payload
            decisions.append(filter_update(cid, updates[cid], guide, self._thresholds, self._tau_zero))
        return decisions

    def inspect_round(self, theta_prev, blobs, lr: float, local_steps: int, round_idx: int = 0) -> List[FilterDecision]:
        """Run the filter without touching the model (diagnostic traces)."""
        updates = self._open_updates(blobs)
        return self._judge(updates, np.asarray(theta_prev, dtype=np.float64), lr, local_steps, round_idx)

    def secure_round(self, theta_prev, blobs, lr: float, local_steps: int, round_idx: int = 0) -> RoundOutcome:
        """Filter every sealed update and apply the mean of the survivors.

        Raises:
            NoSurvivorsError: every client was flagged. The enclave model is
                reset to ``theta_prev`` before raising.
        """
        theta_prev = np.asarray(theta_prev, dtype=np.float64)
        blobs = list(blobs)
        if not blobs:
            raise ValueError("secure_round needs at least one sealed update")
        updates = self._open_updates(blobs)
        decisions = self._judge(updates, theta_prev, lr, local_steps, round_idx)
        accepted = [d.client_id for d in decisions if d.passed]
        flagged = frozenset(d.client_id for d in decisions if not d.passed)
        if not accepted:
            self._theta = theta_prev.copy()
            raise NoSurvivorsError(theta_prev.copy(), decisions)
        total = np.zeros_like(theta_prev)
        for cid in accepted:
            total += updates[cid]
        self._theta = theta_prev - total / len(accepted)
        return RoundOutcome(self._theta.copy(), decisions, flagged, frozenset(accepted))
