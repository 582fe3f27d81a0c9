import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonetemp import paillier as pl


@pytest.fixture(scope="module")
def keypair():
    return pl.keygen(512, seed=7)


def test_keygen_rejects_odd_sizes():
    with pytest.raises(ValueError):
        pl.keygen(777, seed=0)


def test_keygen_distinct_seeds_distinct_keys():
    a = pl.keygen(512, seed=1)
    b = pl.keygen(512, seed=2)
    assert a.public.n != b.public.n
    assert a.public.key_id != b.public.key_id


def test_keygen_deterministic():
    a = pl.keygen(512, seed=5)
    b = pl.keygen(512, seed=5)
    assert a.public.n == b.public.n
    assert a.public.obfuscator_pool == b.public.obfuscator_pool


def test_roundtrip_zero(keypair):
    out = pl.decrypt(keypair.private, pl.encrypt(keypair.public, [0.0], 40))
    assert out[0] == 0.0


def test_roundtrip_dyadic_exact(keypair):
    v = np.array([1.5, -2.25])
    out = pl.decrypt(keypair.private, pl.encrypt(keypair.public, v, 20))
    assert np.array_equal(out, v)


def test_roundtrip_pi_within_quantization(keypair):
    out = pl.decrypt(keypair.private, pl.encrypt(keypair.public, [np.pi], 40))
    assert abs(out[0] - np.pi) <= 2.0**-40


def test_roundtrip_random_vector_bound(keypair):
    rng = np.random.default_rng(3)
    v = rng.normal(size=100)
    out = pl.decrypt(keypair.private, pl.encrypt(keypair.public, v, 40, random.Random(1)))
    assert np.max(np.abs(out - v)) <= 2.0**-40


def test_add_encrypted_examples(keypair):
    pk, sk = keypair.public, keypair.private
    a = pl.encrypt(pk, [1.0, 2.0], 40)
    b = pl.encrypt(pk, [0.5, -1.0], 40)
    out = pl.decrypt(sk, pl.add_encrypted(a, b, pk))
    assert np.allclose(out, [1.5, 1.0], atol=2 * 2.0**-40)

    zeros = pl.encrypt(pk, [0.0, 0.0], 40)
    same = pl.decrypt(sk, pl.add_encrypted(a, zeros, pk))
    assert np.allclose(same, pl.decrypt(sk, a), atol=2 * 2.0**-40)


@settings(max_examples=20, deadline=None)
@given(
    a=st.lists(st.floats(-1000, 1000), min_size=1, max_size=8),
    b=st.lists(st.floats(-1000, 1000), min_size=1, max_size=8),
)
def test_homomorphism_property(keypair, a, b):
    n = min(len(a), len(b))
    va, vb = np.array(a[:n]), np.array(b[:n])
    pk, sk = keypair.public, keypair.private
    ea = pl.encrypt(pk, va, 40, random.Random(0))
    eb = pl.encrypt(pk, vb, 40, random.Random(1))
    out = pl.decrypt(sk, pl.add_encrypted(ea, eb, pk))
    assert np.max(np.abs(out - (va + vb))) <= 2 * 2.0**-40


def test_mismatched_keys_rejected(keypair):
    other = pl.keygen(512, seed=99)
    ev = pl.encrypt(keypair.public, [1.0], 40)
    with pytest.raises(pl.IntegrityError):
        pl.decrypt(other.private, ev)
    eo = pl.encrypt(other.public, [1.0], 40)
    with pytest.raises(pl.IntegrityError):
        pl.add_encrypted(ev, eo, keypair.public)


def test_add_rejects_mismatched_scale_and_length(keypair):
    pk = keypair.public
    a = pl.encrypt(pk, [1.0], 40)
    b = pl.encrypt(pk, [1.0], 20)
    with pytest.raises(ValueError):
        pl.add_encrypted(a, b, pk)
    c = pl.encrypt(pk, [1.0, 2.0], 40)
    with pytest.raises(ValueError):
        pl.add_encrypted(a, c, pk)


def test_fixed_point_overflow_rejected(keypair):
    huge = float(keypair.public.max_plaintext)  # already > bound once scaled
    with pytest.raises(ValueError, match="overflow"):
        pl.encrypt(keypair.public, [huge], 40)


def test_decrypt_counter_increments(keypair):
    kp = pl.keygen(512, seed=55)
    assert kp.private.decrypt_count == 0
    ev = pl.encrypt(kp.public, [1.0, 2.0], 40)
    pl.decrypt(kp.private, ev)
    pl.decrypt(kp.private, ev)
    assert kp.private.decrypt_count == 2


def test_serialize_roundtrip(keypair):
    ev = pl.encrypt(keypair.public, [1.25, -3.5, 0.0], 40, random.Random(2))
    blob = pl.serialize(ev)
    assert pl.deserialize(blob) == ev


def test_serialize_rejects_garbage():
    with pytest.raises(ValueError):
        pl.deserialize(b"nonsense-blob-here")


def test_encrypted_sum_matches_plaintext_sum_small_scale(keypair):
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(10, 50))
    pk, sk = keypair.public, keypair.private
    acc = pl.encrypt(pk, grads[0], 40, random.Random(0))
    for i in range(1, 10):
        acc = pl.add_encrypted(acc, pl.encrypt(pk, grads[i], 40, random.Random(i)), pk)
    out = pl.decrypt(sk, acc)
    assert np.max(np.abs(out - grads.sum(axis=0))) <= 1e-6
