import numpy as np
import pydantic
import pytest

from hefl.crypto import (
    EncryptionMask,
    SchemeParams,
    add_weighted,
    build_mask,
    decrypt_masked,
    deserialize_masked,
    encrypt_masked,
    keygen,
    plain_model,
    scale_masked,
    serialize_masked,
    wire_size,
)
from hefl.errors import CryptoError, FixedPointOverflowError, KeyMismatchError, MaskMismatchError, ShapeError
from hefl.nncore import ModelParams, ParamSlot


def _params(values) -> ModelParams:
    values = np.asarray(values, dtype=np.float64)
    return ModelParams(flat=values, layout=[ParamSlot(name="0.dense.weight", offset=0, length=len(values), shape=(len(values),))])


def test_keygen_is_deterministic_per_seed(small_key):
    again = keygen(7, SchemeParams(modulus_bits=512))
    assert again.public_key.n == small_key.public_key.n
    assert again.fingerprint == small_key.fingerprint
    assert keygen(9, SchemeParams(modulus_bits=512)).public_key.n != small_key.public_key.n
    assert small_key.public_key.n.bit_length() == 512


def test_scheme_params_are_validated():
    with pytest.raises(pydantic.ValidationError):
        SchemeParams(modulus_bits=100)
    with pytest.raises(pydantic.ValidationError):
        SchemeParams(precision_bits=42)


def test_mask_from_sensitivity_takes_largest_magnitudes_lowest_index_first():
    sensitivity = np.array([0.1, -0.9, 0.5, 0.5, 0.5, 0.0, 0.2, 0.3, 0.05, 0.4])
    mask = build_mask(0.3, 10, sensitivity=sensitivity)
    assert np.flatnonzero(mask.bits).tolist() == [1, 2, 3]
    assert mask.eta == pytest.approx(0.3)


def test_mask_ratio_is_exact():
    for eta in (0.0, 0.2, 0.5, 1.0):
        mask = build_mask(eta, 37, seed=3)
        assert mask.popcount == int(np.floor(eta * 37 + 0.5))
        assert mask.eta == mask.popcount / 37
    assert build_mask(0.2, 50, seed=1).same_as(build_mask(0.2, 50, seed=1))
    with pytest.raises(ValueError):
        build_mask(1.2, 10)


def test_mask_run_lengths():
    mask = EncryptionMask(bits=[True, True, False, True])
    assert mask.run_lengths() == [0, 2, 1, 1]
    assert EncryptionMask.from_run_lengths([0, 2, 1, 1]).same_as(mask)


def test_encrypt_then_decrypt_is_close_to_identity(small_key, rng):
    params = _params(rng.normal(0.0, 1.0, size=40))
    mask = build_mask(0.5, 40, seed=0)
    enc = encrypt_masked(params, mask, small_key, seed=1)
    assert enc.cipher.slot_count == 20
    assert len(enc.plain) == 20
    out = decrypt_masked(enc, mask, small_key)
    np.testing.assert_allclose(out.flat, params.flat, rtol=0, atol=1e-9)


def test_decryption_with_the_wrong_key_or_mask_fails(small_key, other_key):
    params = _params(np.linspace(-1, 1, 10))
    mask = build_mask(0.5, 10, seed=0)
    enc = encrypt_masked(params, mask, small_key, seed=1)
    with pytest.raises(KeyMismatchError):
        decrypt_masked(enc, mask, other_key)
    with pytest.raises(MaskMismatchError):
        decrypt_masked(enc, build_mask(0.5, 10, seed=5), small_key)
    with pytest.raises(ShapeError):
        encrypt_masked(params, build_mask(0.5, 11, seed=0), small_key, seed=1)


def test_values_outside_the_plaintext_range_overflow(small_key):
    mask = EncryptionMask(bits=[True])
    with pytest.raises(FixedPointOverflowError):
        encrypt_masked(_params([1e200]), mask, small_key, seed=0)
    with pytest.raises(FixedPointOverflowError):
        encrypt_masked(_params([np.inf]), mask, small_key, seed=0)


def test_weighted_sum_under_encryption_matches_plaintext(small_key, rng):
    vectors = [rng.normal(0.0, 1.0, size=100) for _ in range(3)]
    weights = rng.dirichlet(np.ones(3))
    mask = build_mask(0.2, 100, seed=2)
    models = [encrypt_masked(_params(v), mask, small_key, seed=i) for i, v in enumerate(vectors)]
    acc = scale_masked(models[0], weights[0])
    for model, weight in zip(models[1:], weights[1:]):
        acc = add_weighted(acc, model, weight)
    expected = sum(w * v for w, v in zip(weights, vectors))
    out = decrypt_masked(acc, mask, small_key)
    np.testing.assert_allclose(out.flat, expected, rtol=0, atol=1e-5)


def test_plaintext_models_aggregate_without_a_key(rng):
    a, b = rng.normal(size=6), rng.normal(size=6)
    acc = add_weighted(scale_masked(plain_model(_params(a)), 0.25), plain_model(_params(b)), 0.75)
    np.testing.assert_allclose(acc.to_params().flat, 0.25 * a + 0.75 * b)


def test_mixing_incompatible_models_is_rejected(small_key, other_key):
    params = _params(np.ones(8))
    mask = build_mask(0.25, 8, seed=0)
    enc = encrypt_masked(params, mask, small_key, seed=0)
    with pytest.raises(MaskMismatchError):
        add_weighted(enc, plain_model(params), 0.5)
    with pytest.raises(CryptoError):
        add_weighted(encrypt_masked(params, EncryptionMask.empty(8), small_key, 0), plain_model(params), 0.5)
    with pytest.raises(KeyMismatchError):
        add_weighted(enc, encrypt_masked(params, mask, other_key, seed=0), 0.5)
    with pytest.raises(CryptoError):
        enc.to_params()


def test_wire_format_restores_the_message_and_counts_cipher_bytes(small_key, rng):
    params = _params(rng.normal(size=30))
    mask = build_mask(0.2, 30, seed=4)
    enc = encrypt_masked(params, mask, small_key, seed=3)
    data = serialize_masked(enc)
    total, cipher = wire_size(enc)
    assert total == len(data)
    assert cipher == 6 * small_key.slot_bytes == enc.cipher.byte_size
    assert enc.cipher.expansion_factor == small_key.slot_bytes / 8
    restored = deserialize_masked(data, small_key.public_key)
    assert restored.mask.same_as(mask)
    np.testing.assert_array_equal(decrypt_masked(restored, mask, small_key).flat, decrypt_masked(enc, mask, small_key).flat)

    plain = deserialize_masked(serialize_masked(plain_model(params)))
    assert not plain.is_encrypted
    np.testing.assert_array_equal(plain.to_params().flat, params.flat)


def test_wire_format_rejects_foreign_bytes_and_keys(small_key, other_key):
    enc = encrypt_masked(_params([0.5, 0.25]), EncryptionMask(bits=[True, False]), small_key, seed=0)
    with pytest.raises(KeyMismatchError):
        deserialize_masked(serialize_masked(enc), other_key.public_key)
    with pytest.raises(CryptoError):
        deserialize_masked(b"\x93\x01\x02")
    with pytest.raises(CryptoError):
        deserialize_masked(b"not a model")


def test_ciphertexts_look_random(small_key):
    step = small_key.slot_bytes
    # Two messages of half a megabyte each.
    slots = -(-(1 << 19) // step)
    mask = EncryptionMask(bits=np.ones(slots, dtype=bool))
    first = encrypt_masked(_params(np.zeros(slots)), mask, small_key, seed=1).cipher.payload
    second = encrypt_masked(_params(np.ones(slots)), mask, small_key, seed=2).cipher.payload
    assert len(first + second) >= 1 << 20
    assert all(first[i : i + step] != second[i : i + step] for i in range(0, len(first), step))

    counts = np.bincount(np.frombuffer(first + second, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / counts.sum()
    assert -(p * np.log2(p)).sum() > 7.0
