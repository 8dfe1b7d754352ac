import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diversefl import enclave as enc
from diversefl import nn
from diversefl.data import SampleBatch
from diversefl.errors import DuplicateProvisionError, NoSurvivorsError, SealError, UnknownClientError

SPEC = nn.ModelSpec((4, 3, 2), init_seed=1)


def _sample(owner, seed=0, m=6):
    rng = np.random.default_rng(seed)
    return SampleBatch(owner, rng.normal(size=(m, 4)), rng.integers(0, 2, size=m))


def _provisioned(ids=(0, 1, 2), **kw):
    e = enc.Enclave(SPEC, key_secret=9, **kw)
    keys = {}
    for cid in ids:
        keys[cid] = e.establish_key(cid)
        e.provision_sample(enc.seal(enc.encode_sample(_sample(cid, cid)), keys[cid], cid, 0, 0))
    return e, keys


def test_kappa_sweep_matches_characterization():
    rng = np.random.default_rng(0)
    th = enc.Thresholds()
    for _ in range(20):
        guide = rng.normal(size=7)
        for kappa in np.linspace(-3, 3, 601):
            passed = enc.filter_update(0, kappa * guide, guide, th).passed
            assert passed == (0.5 < kappa < 2), kappa


def test_similarity_examples():
    g = np.array([1.0, -2.0, 0.5])
    assert enc.similarity(g, g) == (1.0, 1.0)
    assert enc.similarity(-g, g) == (-1.0, 1.0)
    c1, c2 = enc.similarity(3 * g, g)
    assert c1 == 1.0 and c2 == pytest.approx(3.0)
    with pytest.raises(ValueError):
        enc.similarity(g, g[:2])


def test_filter_examples():
    g = np.array([0.2, 0.1])
    assert enc.filter_update(0, g, g).passed
    d = enc.filter_update(0, -g, g)
    assert not d.passed and d.failed_condition == "direction"
    d = enc.filter_update(0, 10 * g, g)
    assert not d.passed and d.failed_condition == "length" and d.c2 == pytest.approx(10)
    d = enc.filter_update(0, -10 * g, g)
    assert d.failed_condition == "both"


def test_orthogonal_update_is_flagged():
    d = enc.filter_update(0, np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert d.c1 == 0.0 and not d.passed


def test_zero_norm_guard():
    tiny = np.full(3, 1e-14)
    d = enc.filter_update(0, tiny, tiny * 0.5)
    assert d.passed and d.c2 == 1.0
    d = enc.filter_update(0, np.ones(3), np.zeros(3))
    assert d.c2 == math.inf and not d.passed


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-0.99, 0.99), st.floats(0.01, 0.99), st.floats(1.01, 50))
def test_duplicate_always_passes(seed, eps1, eps2, eps3):
    guide = np.random.default_rng(seed).normal(size=5)
    assert enc.filter_update(0, guide, guide, enc.Thresholds(eps1, eps2, eps3)).passed


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_sign_flip_always_flagged(seed, scale):
    rng = np.random.default_rng(seed)
    guide = rng.normal(size=6)
    delta = guide + 0.3 * rng.normal(size=6)
    if delta @ guide <= 0:
        return
    assert not enc.filter_update(0, -scale * delta, guide).passed


@settings(max_examples=100)
@given(st.binary(max_size=300), st.integers(0, 2**32 - 1), st.integers(0, 2**63))
def test_seal_round_trip(payload, owner, nonce):
    key = enc.derive_key(5, owner)
    blob = enc.seal(payload, key, owner, 3, nonce)
    assert enc.unseal(blob, key) == payload
    assert enc.unseal(enc.SealedBlob.from_bytes(blob.to_bytes()), key) == payload
    if payload:
        assert blob.ciphertext[: len(payload)] != payload or len(payload) < 4


def test_seal_wrong_key_and_tamper_fail_loudly():
    key = enc.derive_key(1, 0)
    blob = enc.seal(b"secret update", key, 0, 1, 7)
    with pytest.raises(SealError):
        enc.unseal(blob, enc.derive_key(2, 0))
    relabelled = enc.SealedBlob(1, blob.round, blob.nonce, blob.ciphertext)
    with pytest.raises(SealError):
        enc.unseal(relabelled, key)
    with pytest.raises(SealError):
        enc.SealedBlob.from_bytes(blob.to_bytes()[:-1])


def test_vector_and_sample_codecs():
    v = np.array([1.5, -0.0, np.pi])
    assert np.array_equal(enc.decode_vector(enc.encode_vector(v)), v)
    s = _sample(4)
    back = enc.decode_sample(enc.encode_sample(s), 4)
    assert np.array_equal(back.features, s.features) and np.array_equal(back.labels, s.labels)


def test_provision_examples():
    e, keys = _provisioned(ids=(5,))
    assert e.is_provisioned(5) and e.provisioned_clients() == [5]
    with pytest.raises(DuplicateProvisionError):
        e.provision_sample(enc.seal(enc.encode_sample(_sample(5)), keys[5], 5, 0, 1))
    e.establish_key(6)
    with pytest.raises(SealError):
        e.provision_sample(enc.seal(enc.encode_sample(_sample(6)), keys[5], 6, 0, 0))
    assert not e.is_provisioned(6)
    with pytest.raises(UnknownClientError):
        e.provision_sample(enc.seal(b"", b"k" * 32, 99, 0, 0))


def test_guiding_update_examples():
    theta = nn.init_model(SPEC)
    s = _sample(0)
    g = nn.loss_and_grad(SPEC, theta, s.features, s.labels, 0.01).gradient
    np.testing.assert_allclose(enc.guiding_update(SPEC, s, theta, 0.3, 1, 0.01), 0.3 * g, rtol=1e-12, atol=1e-15)
    assert not enc.guiding_update(SPEC, s, theta, 0.0, 3).any()


def test_guiding_update_two_steps_closed_form():
    # bias-only model: softmax of (b0, b1); one example of class 0 has
    # gradient p - e0, so two steps can be unrolled by hand
    spec = nn.ModelSpec((1, 2))
    theta = np.zeros(spec.num_params)
    s = SampleBatch(0, np.zeros((1, 1)), np.array([0]))
    lr = 0.5
    b = np.zeros(2)
    for _ in range(2):
        p = np.exp(b) / np.exp(b).sum()
        b = b - lr * (p - np.array([1.0, 0.0]))
    expected = np.concatenate([[0.0, 0.0], -b])
    np.testing.assert_allclose(enc.guiding_update(spec, s, theta, lr, 2), expected, rtol=1e-14)


def test_guiding_update_unknown_client():
    e, _ = _provisioned(ids=(0,))
    key = e.establish_key(3)
    blob = enc.seal(enc.encode_vector(np.zeros(SPEC.num_params)), key, 3, 1, 0)
    with pytest.raises(UnknownClientError):
        e.secure_round(nn.init_model(SPEC), [blob], 0.1, 1)


def _honest_blobs(e, keys, theta, lr, tweak=None):
    blobs = []
    for cid, key in keys.items():
        z = enc.guiding_update(SPEC, _sample(cid, cid), theta, lr, 1)
        if tweak is not None:
            z = tweak(cid, z)
        blobs.append(enc.seal(enc.encode_vector(z), key, cid, 1, cid))
    return blobs


def test_secure_round_all_honest_is_mean():
    e, keys = _provisioned()
    theta = nn.init_model(SPEC)
    zs = [enc.guiding_update(SPEC, _sample(c, c), theta, 0.2, 1) for c in keys]
    out = e.secure_round(theta, _honest_blobs(e, keys, theta, 0.2), 0.2, 1)
    assert out.flagged == frozenset()
    np.testing.assert_allclose(out.theta, theta - np.mean(zs, axis=0), rtol=1e-14, atol=1e-16)
    np.testing.assert_array_equal(e.model, out.theta)


def test_secure_round_excludes_sign_flip():
    e, keys = _provisioned()
    theta = nn.init_model(SPEC)
    out = e.secure_round(theta, _honest_blobs(e, keys, theta, 0.2, lambda c, z: -z if c == 1 else z), 0.2, 1)
    assert out.flagged == {1} and out.accepted == {0, 2}


def test_secure_round_no_survivors_freezes_model():
    e, keys = _provisioned()
    theta = nn.init_model(SPEC)
    with pytest.raises(NoSurvivorsError) as info:
        e.secure_round(theta, _honest_blobs(e, keys, theta, 0.2, lambda c, z: -z), 0.2, 1)
    np.testing.assert_array_equal(info.value.theta, theta)
    np.testing.assert_array_equal(e.model, theta)
    assert len(info.value.decisions) == 3


def test_interface_exposes_no_plaintext():
    public = {n for n in dir(enc.Enclave) if not n.startswith("_")}
    assert public == {"thresholds", "model", "establish_key", "is_provisioned", "provisioned_clients",
                      "provision_sample", "inspect_round", "secure_round"}
    leaky = {"SampleBatch", "ClientUpdate", "GuidingUpdate"}
    for name in public:
        attr = getattr(enc.Enclave, name)
        fn = attr.fget if isinstance(attr, property) else attr
        ret = str(inspect.signature(fn).return_annotation)
        assert not any(t in ret for t in leaky), (name, ret)
    fields = {f for f in enc.RoundOutcome.__dataclass_fields__}
    assert fields == {"theta", "decisions", "flagged", "accepted"}


def test_thresholds_validation():
    with pytest.raises(ValueError):
        enc.Thresholds(0, 2.0, 1.0)
    with pytest.raises(ValueError):
        enc.Thresholds(0, 0.0, 1.0)
