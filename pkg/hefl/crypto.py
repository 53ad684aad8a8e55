"""
Selective homomorphic encryption of model parameter vectors.

A run-wide ``EncryptionMask`` picks the parameter positions that travel as
Paillier ciphertexts; the remaining positions travel in plaintext. Masked
models support the two operations weighted averaging needs, scaling by a
plaintext weight and homomorphic addition, so the server never decrypts.

Values are fixed-point encoded at scale ``2**precision_bits`` before
encryption. One ciphertext slot holds one parameter.
"""

import hashlib
from typing import List, Optional, Sequence, Tuple

import msgpack
import msgpack_numpy
import numpy as np
import pydantic
import sympy
from loguru import logger
from phe import paillier
from phe.paillier import EncodedNumber, EncryptedNumber

from hefl.errors import (
    CryptoError,
    FixedPointOverflowError,
    KeyMismatchError,
    MaskMismatchError,
    ShapeError,
)
from hefl.nncore import ModelParams, ParamSlot

WIRE_MAGIC = b"HEFL"
WIRE_VERSION = 1


class SchemeParams(pydantic.BaseModel):
    modulus_bits: int = pydantic.Field(
        1024,
        title="modulus_bits",
        description="Bit length of the Paillier modulus n.",
    )
    precision_bits: int = pydantic.Field(
        40,
        title="precision_bits",
        description="Fixed-point scale S = 2**precision_bits applied before encryption.",
    )

    class Config:
        validate_assignment = True

    @pydantic.validator("modulus_bits")
    def _check_modulus(cls, value):
        if value < 256 or value > 4096 or value % 64:
            raise ValueError(f"modulus_bits must be a multiple of 64 in [256, 4096], got {value}")
        return value

    @pydantic.validator("precision_bits")
    def _check_precision(cls, value):
        if value < 4 or value > 120 or value % 4:
            raise ValueError(f"precision_bits must be a multiple of 4 in [4, 120], got {value}")
        return value


class Keypair(pydantic.BaseModel):
    public_key: paillier.PaillierPublicKey
    private_key: paillier.PaillierPrivateKey
    params: SchemeParams
    seed: int

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @property
    def fingerprint(self) -> str:
        return key_fingerprint(self.public_key)

    @property
    def slot_bytes(self) -> int:
        return (self.public_key.nsquare.bit_length() + 7) // 8


def key_fingerprint(public_key: paillier.PaillierPublicKey) -> str:
    n = public_key.n
    return hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).hexdigest()[:16]


class EncryptionMask(pydantic.BaseModel):
    bits: np.ndarray = pydantic.Field(..., description="True where the parameter is encrypted.")
    eta: float = pydantic.Field(0.0, description="Encryption ratio popcount(bits) / len(bits).")

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @pydantic.root_validator(pre=True)
    def _derive_eta(cls, values):
        bits = np.asarray(values.get("bits"), dtype=bool).reshape(-1)
        values["bits"] = bits
        values["eta"] = float(bits.sum()) / len(bits) if len(bits) else 0.0
        return values

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def same_as(self, other: "EncryptionMask") -> bool:
        return np.array_equal(self.bits, other.bits)

    def run_lengths(self) -> List[int]:
        """Alternating run lengths, starting with a (possibly empty) run of zeros."""
        if not len(self.bits):
            return []
        bits = self.bits.astype(np.int8)
        bounds = np.concatenate([[0], np.flatnonzero(np.diff(bits)) + 1, [len(bits)]])
        runs = np.diff(bounds).tolist()
        return [0] + runs if bits[0] else runs

    @classmethod
    def from_run_lengths(cls, runs: Sequence[int]) -> "EncryptionMask":
        parts = [np.full(int(r), i % 2 == 1) for i, r in enumerate(runs)]
        return cls(bits=np.concatenate(parts) if parts else np.zeros(0, dtype=bool))

    @classmethod
    def empty(cls, length: int) -> "EncryptionMask":
        return cls(bits=np.zeros(length, dtype=bool))


class CipherBlock(pydantic.BaseModel):
    """Ciphertexts of the masked positions, packed as fixed-width big-endian slots."""

    payload: bytes
    slot_count: int = pydantic.Field(..., ge=0)
    slot_bytes: int = pydantic.Field(..., ge=1)
    exponent: int = 0

    class Config:
        allow_mutation = False

    @pydantic.root_validator(skip_on_failure=True)
    def _check_size(cls, values):
        if len(values["payload"]) != values["slot_count"] * values["slot_bytes"]:
            raise ValueError("payload length must equal slot_count * slot_bytes")
        return values

    @property
    def expansion_factor(self) -> float:
        """Ciphertext bytes per 8-byte plaintext float."""
        return self.slot_bytes / 8.0

    @property
    def byte_size(self) -> int:
        return len(self.payload)

    def to_numbers(self, public_key: paillier.PaillierPublicKey) -> List[EncryptedNumber]:
        step = self.slot_bytes
        return [
            EncryptedNumber(public_key, int.from_bytes(self.payload[i * step : (i + 1) * step], "big"), self.exponent)
            for i in range(self.slot_count)
        ]

    @classmethod
    def from_numbers(cls, numbers: Sequence[EncryptedNumber], slot_bytes: int) -> "CipherBlock":
        if not numbers:
            return cls(payload=b"", slot_count=0, slot_bytes=slot_bytes, exponent=0)
        exponent = min(n.exponent for n in numbers)
        aligned = [n if n.exponent == exponent else n.decrease_exponent_to(exponent) for n in numbers]
        payload = b"".join(n.ciphertext(be_secure=False).to_bytes(slot_bytes, "big") for n in aligned)
        return cls(payload=payload, slot_count=len(numbers), slot_bytes=slot_bytes, exponent=exponent)

    @classmethod
    def empty(cls, slot_bytes: int = 1) -> "CipherBlock":
        return cls(payload=b"", slot_count=0, slot_bytes=slot_bytes, exponent=0)


class MaskedModel(pydantic.BaseModel):
    """
    A parameter vector split by ``mask``: ``cipher`` holds the masked positions
    in ascending order, ``plain`` the others. Unencrypted messages carry an
    all-zero mask and an empty cipher block.
    """

    mask: EncryptionMask
    cipher: CipherBlock
    plain: np.ndarray
    is_encrypted: bool
    layout: List[ParamSlot]
    key_fingerprint: Optional[str] = None
    public_key: Optional[paillier.PaillierPublicKey] = pydantic.Field(
        None, description="Key for homomorphic arithmetic; never serialized."
    )

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @pydantic.validator("plain", pre=True)
    def _as_float(cls, value):
        return np.asarray(value, dtype=np.float64).reshape(-1)

    @pydantic.root_validator(skip_on_failure=True)
    def _check_split(cls, values):
        mask, cipher, plain = values["mask"], values["cipher"], values["plain"]
        if cipher.slot_count + len(plain) != len(mask):
            raise ValueError("cipher slots and plain entries must cover the mask exactly")
        if cipher.slot_count != mask.popcount:
            raise ValueError("one cipher slot per masked position is required")
        if not values["is_encrypted"] and cipher.slot_count:
            raise ValueError("an unencrypted model cannot carry ciphertexts")
        return values

    def __len__(self) -> int:
        return len(self.mask)

    def to_params(self) -> ModelParams:
        """Reassembles an unencrypted model."""
        if self.is_encrypted and self.mask.popcount:
            raise CryptoError("model holds ciphertexts; use decrypt_masked")
        return ModelParams(flat=self.plain.copy(), layout=self.layout)


# --- Keys.


def _draw_prime(rng: np.random.Generator, bits: int) -> int:
    candidate = int.from_bytes(rng.bytes((bits + 7) // 8), "big") >> ((8 - bits % 8) % 8)
    # Top two bits set so that p*q has the full modulus length.
    candidate |= (3 << (bits - 2)) | 1
    return int(sympy.nextprime(candidate))


def keygen(seed: int, params: Optional[SchemeParams] = None) -> Keypair:
    """
    Deterministic Paillier keypair: primes are the next primes after seeded
    random candidates, so the same seed always yields the same key.
    """
    params = params or SchemeParams()
    rng = np.random.default_rng(seed)
    half = params.modulus_bits // 2
    p = _draw_prime(rng, half)
    q = _draw_prime(rng, half)
    while q == p:
        q = _draw_prime(rng, half)
    public_key = paillier.PaillierPublicKey(p * q)
    private_key = paillier.PaillierPrivateKey(public_key, p, q)
    keypair = Keypair(public_key=public_key, private_key=private_key, params=params, seed=seed)
    logger.debug(f"Generated {params.modulus_bits}-bit Paillier key {keypair.fingerprint} (slot {keypair.slot_bytes} bytes)")
    return keypair


# --- Masks.


def build_mask(
    eta: float,
    param_count: int,
    sensitivity: Optional[np.ndarray] = None,
    seed: int = 0,
) -> EncryptionMask:
    """
    Selects ``round(eta * param_count)`` positions: the largest ``|sensitivity|``
    entries (ties to the lowest index) when a sensitivity vector is given,
    otherwise a seeded uniform choice.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    count = int(np.floor(eta * param_count + 0.5))
    bits = np.zeros(param_count, dtype=bool)
    if sensitivity is not None:
        sensitivity = np.asarray(sensitivity, dtype=np.float64).reshape(-1)
        if len(sensitivity) != param_count:
            raise ShapeError(f"sensitivity has length {len(sensitivity)}, expected {param_count}")
        order = np.lexsort((np.arange(param_count), -np.abs(sensitivity)))
        bits[order[:count]] = True
    else:
        bits[np.random.default_rng(seed).choice(param_count, size=count, replace=False)] = True
    mask = EncryptionMask(bits=bits)
    logger.debug(f"Built encryption mask: {mask.popcount}/{param_count} positions (eta={mask.eta:.4f})")
    return mask


# --- Encryption.


def _check_key(m: MaskedModel, key: Keypair):
    if m.key_fingerprint is not None and m.key_fingerprint != key.fingerprint:
        raise KeyMismatchError(f"model was encrypted under key {m.key_fingerprint}, not {key.fingerprint}")


def _encode(value: float, key: Keypair) -> EncodedNumber:
    public_key = key.public_key
    scaled = value * float(2 ** key.params.precision_bits)
    if not np.isfinite(scaled):
        raise FixedPointOverflowError(f"value {value} cannot be encoded")
    encoding = int(np.rint(scaled))
    if abs(encoding) > public_key.max_int:
        raise FixedPointOverflowError(f"value {value} exceeds the plaintext range at {key.params.precision_bits} bits")
    return EncodedNumber(public_key, encoding % public_key.n, -(key.params.precision_bits // 4))


def encrypt_masked(params: ModelParams, mask: EncryptionMask, key: Keypair, seed: int) -> MaskedModel:
    """
    Encrypts the masked positions of ``params``. Ciphertext randomness comes
    from ``default_rng(seed)``.

    Raises:
        ShapeError: When mask and parameters differ in length.
        FixedPointOverflowError: When a value does not fit the plaintext space.
    """
    if len(mask) != len(params):
        raise ShapeError(f"mask has length {len(mask)}, parameters {len(params)}")
    rng = np.random.default_rng(seed)
    public_key = key.public_key
    nbytes = (public_key.n.bit_length() + 7) // 8
    numbers = []
    for value in params.flat[mask.bits]:
        r = int.from_bytes(rng.bytes(nbytes), "big") % public_key.n or 1
        numbers.append(public_key.encrypt_encoded(_encode(float(value), key), r))
    return MaskedModel(
        mask=mask,
        cipher=CipherBlock.from_numbers(numbers, key.slot_bytes),
        plain=params.flat[~mask.bits].copy(),
        is_encrypted=True,
        layout=params.layout,
        key_fingerprint=key.fingerprint,
        public_key=key.public_key,
    )


def plain_model(params: ModelParams) -> MaskedModel:
    return MaskedModel(
        mask=EncryptionMask.empty(len(params)),
        cipher=CipherBlock.empty(),
        plain=params.flat.copy(),
        is_encrypted=False,
        layout=params.layout,
    )


def decrypt_masked(m: MaskedModel, mask: EncryptionMask, key: Keypair) -> ModelParams:
    """
    Raises:
        MaskMismatchError: When ``m`` was built with a different mask.
        KeyMismatchError: When ``m`` was encrypted under a different key.
        FixedPointOverflowError: When a decrypted value overflowed.
    """
    if not m.is_encrypted:
        return m.to_params()
    if not m.mask.same_as(mask):
        raise MaskMismatchError("model mask differs from the decryption mask")
    _check_key(m, key)
    flat = np.empty(len(mask))
    try:
        flat[mask.bits] = [key.private_key.decrypt(n) for n in m.cipher.to_numbers(key.public_key)]
    except OverflowError as e:
        raise FixedPointOverflowError(str(e)) from e
    flat[~mask.bits] = m.plain
    return ModelParams(flat=flat, layout=m.layout)


# --- Homomorphic arithmetic.


def _public_key_for(m: MaskedModel) -> paillier.PaillierPublicKey:
    if m.public_key is None:
        raise CryptoError("no public key attached to the encrypted model")
    return m.public_key


def scale_masked(m: MaskedModel, weight: float) -> MaskedModel:
    """Multiplies every entry of ``m`` by the plaintext scalar ``weight``."""
    try:
        if m.cipher.slot_count:
            public_key = _public_key_for(m)
            numbers = [n * float(weight) for n in m.cipher.to_numbers(public_key)]
            cipher = CipherBlock.from_numbers(numbers, m.cipher.slot_bytes)
        else:
            cipher = m.cipher
    except OverflowError as e:
        raise FixedPointOverflowError(str(e)) from e
    return MaskedModel(
        mask=m.mask,
        cipher=cipher,
        plain=m.plain * weight,
        is_encrypted=m.is_encrypted,
        layout=m.layout,
        key_fingerprint=m.key_fingerprint,
        public_key=m.public_key,
    )


def add_weighted(acc: MaskedModel, x: MaskedModel, weight: float) -> MaskedModel:
    """
    Returns ``acc + weight * x`` evaluated under encryption on the masked
    positions and in plaintext elsewhere.

    Raises:
        MaskMismatchError: When the two models use different masks.
        KeyMismatchError: When they were encrypted under different keys.
        CryptoError: When one is encrypted and the other is not.
    """
    if not acc.mask.same_as(x.mask):
        raise MaskMismatchError("cannot add models built with different masks")
    if acc.is_encrypted != x.is_encrypted:
        raise CryptoError("cannot add an encrypted and an unencrypted model")
    if acc.key_fingerprint != x.key_fingerprint:
        raise KeyMismatchError(f"cannot add models under keys {acc.key_fingerprint} and {x.key_fingerprint}")
    scaled = scale_masked(x, weight)
    if acc.cipher.slot_count:
        public_key = _public_key_for(acc)
        try:
            numbers = [a + b for a, b in zip(acc.cipher.to_numbers(public_key), scaled.cipher.to_numbers(public_key))]
        except OverflowError as e:
            raise FixedPointOverflowError(str(e)) from e
        cipher = CipherBlock.from_numbers(numbers, acc.cipher.slot_bytes)
    else:
        cipher = acc.cipher
    return MaskedModel(
        mask=acc.mask,
        cipher=cipher,
        plain=acc.plain + scaled.plain,
        is_encrypted=acc.is_encrypted,
        layout=acc.layout,
        key_fingerprint=acc.key_fingerprint,
        public_key=acc.public_key or x.public_key,
    )


# --- Wire format.


def serialize_masked(m: MaskedModel) -> bytes:
    message = {
        "magic": WIRE_MAGIC,
        "version": WIRE_VERSION,
        "encrypted": m.is_encrypted,
        "key": m.key_fingerprint,
        "mask": m.mask.run_lengths(),
        "layout": [[s.name, s.offset, s.length, list(s.shape)] for s in m.layout],
        "slots": m.cipher.slot_count,
        "slot_bytes": m.cipher.slot_bytes,
        "exponent": m.cipher.exponent,
        "cipher": m.cipher.payload,
        "plain": m.plain,
    }
    return msgpack.packb(message, default=msgpack_numpy.encode, use_bin_type=True)


def deserialize_masked(data: bytes, public_key: Optional[paillier.PaillierPublicKey] = None) -> MaskedModel:
    """
    Decodes a message produced by serialize_masked. ``public_key`` is attached
    for homomorphic arithmetic and must match the key the message names.
    """
    try:
        message = msgpack.unpackb(data, object_hook=msgpack_numpy.decode, raw=False)
    except (ValueError, msgpack.ExtraData, msgpack.FormatError, msgpack.StackError) as e:
        raise CryptoError(f"malformed model message: {e}") from e
    if not isinstance(message, dict) or message.get("magic") != WIRE_MAGIC or message.get("version") != WIRE_VERSION:
        raise CryptoError("not a model message or unsupported version")
    if public_key is not None and message["key"] is not None and key_fingerprint(public_key) != message["key"]:
        raise KeyMismatchError(f"message names key {message['key']}, not {key_fingerprint(public_key)}")
    return MaskedModel(
        mask=EncryptionMask.from_run_lengths(message["mask"]),
        cipher=CipherBlock(
            payload=message["cipher"],
            slot_count=message["slots"],
            slot_bytes=message["slot_bytes"],
            exponent=message["exponent"],
        ),
        plain=np.array(message["plain"], dtype=np.float64),
        is_encrypted=message["encrypted"],
        layout=[ParamSlot(name=n, offset=o, length=l, shape=tuple(s)) for n, o, l, s in message["layout"]],
        key_fingerprint=message["key"],
        public_key=public_key if message["encrypted"] else None,
    )


def wire_size(m: MaskedModel) -> Tuple[int, int]:
    """``(total serialized bytes, ciphertext bytes)`` of one message."""
    return len(serialize_masked(m)), m.cipher.byte_size
