import math

import numpy as np
import pytest

from milcl.model import (
    Bag,
    GatedAttention,
    LinearHead,
    MilModel,
    backward,
    binary_grad_identities,
    binary_loss,
    expand_head,
    forward_attention,
    forward_classifier,
    load_checkpoint,
    model_from_bytes,
    numerical_gradients,
    predict,
    relative_error,
    save_checkpoint,
    checkpoint_bytes,
    value_and_grad,
)
from milcl.numerics import RngStream
from milcl.validation import FormatError


def random_instance(seed, N=None, d=None, D=None, C=None):
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(1, 7))
    d = d or int(rng.integers(1, 6))
    D = D or int(rng.integers(1, 5))
    C = C or int(rng.integers(1, 4))
    theta = GatedAttention(rng.normal(size=(D, d)), rng.normal(size=(D, d)), rng.normal(size=D))
    phi = LinearHead(rng.normal(size=(C, d)), rng.normal(size=C))
    H = rng.normal(size=(N, d))
    return H, theta, phi, int(rng.integers(0, C))


def test_zero_theta_gives_uniform_attention():
    H = np.arange(12.0).reshape(4, 3)
    theta = GatedAttention(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2))
    out = forward_attention(H, theta)
    np.testing.assert_allclose(out.attention, 0.25)
    np.testing.assert_allclose(out.bag_feature, H.mean(axis=0))


def test_single_patch_bag():
    H, theta, _, _ = random_instance(0, N=1, d=4, D=3)
    out = forward_attention(H, theta)
    np.testing.assert_array_equal(out.attention, [1.0])
    np.testing.assert_allclose(out.bag_feature, H[0])


def test_hand_set_two_patch_instance():
    H = [[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]
    V1 = [[0.2, -0.1, 0.3], [0.0, 0.4, -0.2]]
    V2 = [[-0.3, 0.1, 0.0], [0.5, 0.5, 0.5]]
    w = [1.5, -0.7]
    # straight-line evaluation of w . (tanh(V1 h) * sigmoid(V2 h)) per patch
    raw = []
    for h in H:
        s = 0.0
        for k in range(2):
            u = sum(V1[k][j] * h[j] for j in range(3))
            g = sum(V2[k][j] * h[j] for j in range(3))
            s += w[k] * math.tanh(u) * (1.0 / (1.0 + math.exp(-g)))
        raw.append(s)
    e = [math.exp(r) for r in raw]
    a = [x / sum(e) for x in e]
    z = [a[0] * H[0][j] + a[1] * H[1][j] for j in range(3)]

    out = forward_attention(np.array(H), GatedAttention(V1, V2, w))
    np.testing.assert_allclose(out.raw_scores, raw, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.attention, a, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.bag_feature, z, rtol=0, atol=1e-14)


def test_bag_feature_is_attention_weighted_sum():
    H, theta, _, _ = random_instance(3, N=6, d=5, D=4)
    out = forward_attention(H, theta)
    assert abs(out.attention.sum() - 1) < 1e-12
    np.testing.assert_allclose(out.bag_feature, H.T @ out.attention, atol=1e-10)


def test_forward_attention_dimension_mismatch():
    _, theta, _, _ = random_instance(1, d=3)
    with pytest.raises(ValueError):
        forward_attention(np.ones((2, 4)), theta)


def test_classifier_zero_weight_returns_bias():
    phi = LinearHead(np.zeros((3, 2)), [0.1, -0.2, 0.3])
    np.testing.assert_array_equal(forward_classifier([5.0, -7.0], phi), [0.1, -0.2, 0.3])


def test_classifier_unit_vector_picks_column():
    W = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(forward_classifier([1.0, 0.0], LinearHead(W, np.zeros(3))), W[:, 0])


def test_classifier_matches_loop_oracle():
    rng = np.random.default_rng(7)
    W, b, z = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=4)
    oracle = [sum(W[c][j] * z[j] for j in range(4)) + b[c] for c in range(3)]
    np.testing.assert_allclose(forward_classifier(z, LinearHead(W, b)), oracle, atol=1e-14)


def test_classifier_dimension_mismatch():
    with pytest.raises(ValueError):
        forward_classifier([1.0, 2.0, 3.0], LinearHead(np.zeros((2, 2)), np.zeros(2)))


def test_loss_at_uniform_logits_is_log_c():
    H = np.ones((3, 2))
    theta = GatedAttention(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2))
    loss, _ = backward(H, 1, theta, LinearHead(np.zeros((4, 2)), np.zeros(4)))
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_identical_patches_get_identical_attention_gradient():
    rng = np.random.default_rng(11)
    H = np.tile(rng.normal(size=3), (5, 1))
    theta = GatedAttention(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=4))
    phi = LinearHead(rng.normal(size=(2, 3)), rng.normal(size=2))
    # per-patch contribution to the logits is equal, so dL/da_i is too
    out = forward_attention(H, theta)
    logits = forward_classifier(out.bag_feature, phi)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    p[0] -= 1
    d_a = H @ (phi.weight.T @ p)
    np.testing.assert_allclose(d_a, d_a[0])
    _, grads = backward(H, 0, theta, phi)
    # softmax Jacobian projection of equal dL/da is zero
    np.testing.assert_allclose(grads.w, 0, atol=1e-12)


def test_label_out_of_range():
    H, theta, phi, _ = random_instance(2, C=2)
    with pytest.raises(ValueError):
        backward(H, 2, theta, phi)


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    H, theta, phi, label = random_instance(seed)
    model = MilModel(theta, phi)
    _, grads = backward(H, label, theta, phi)
    numeric = numerical_gradients(lambda: backward(H, label, theta, phi)[0], model.parameters(), 1e-4)
    for analytic, fd in zip(grads.arrays(), numeric):
        assert relative_error(analytic, fd, floor=1e-6) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_replay_loss_gradients_match_finite_differences(seed):
    H, theta, phi, label = random_instance(100 + seed, C=3)
    rng = np.random.default_rng(seed)
    model = MilModel(theta, phi)
    kwargs = dict(attn_target=rng.normal(size=H.shape[0]), logits_target=rng.normal(size=2),
                  alpha=0.7, beta=1.3, temperature=1.5)
    _, grads = value_and_grad(model, H, label, **kwargs)
    numeric = numerical_gradients(lambda: value_and_grad(model, H, label, **kwargs)[0].total,
                                  model.parameters(), 1e-4)
    for analytic, fd in zip(grads.arrays(), numeric):
        assert relative_error(analytic, fd, floor=1e-6) < 1e-4


def test_binary_identities_at_f_zero():
    H = np.array([[1.0, 2.0], [3.0, -1.0]])
    a = np.array([0.5, 0.5])
    phi = np.array([0.5, -2.0])  # z = (2, 0.5), so f = 0
    r = binary_grad_identities(H, a, phi, 1)
    assert r.f == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(r.grad_phi_sq, r.z**2 / 4, rtol=1e-15)
    np.testing.assert_allclose(r.rhs_phi, r.z**2 / 4, rtol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_binary_identities_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    N, d = 5, 4
    H, phi = rng.normal(size=(N, d)), rng.normal(size=d)
    a = rng.dirichlet(np.ones(N))
    r = binary_grad_identities(H, a, phi, 1)
    np.testing.assert_allclose(r.grad_phi_sq, r.rhs_phi, rtol=1e-10, atol=0)
    np.testing.assert_allclose(r.grad_a_sq, r.rhs_a, rtol=1e-10, atol=0)

    fd_phi = numerical_gradients(lambda: binary_loss(H, a, phi, 1), [phi], 1e-5)[0]
    fd_a = numerical_gradients(lambda: binary_loss(H, a, phi, 1), [a], 1e-5)[0]
    assert relative_error(r.grad_phi, fd_phi, floor=1e-9) < 1e-6
    assert relative_error(r.grad_a, fd_a, floor=1e-9) < 1e-6


def test_binary_identities_scaling_witness():
    H = np.array([[2.0, -1.0, 0.5], [-1.5, 3.0, 1.0], [0.5, 0.5, -2.0]])
    a = np.array([0.2, 0.5, 0.3])
    phi = np.array([-1.0, -0.5, 0.25])
    assert float(phi @ H.T @ a) < 0  # misclassified for y = +1
    bound = np.abs(H).max(axis=0)
    grad_a = []
    for c in (1, 10, 100):
        r = binary_grad_identities(H, a, c * phi, 1)
        assert np.all(np.abs(r.grad_phi) <= bound)
        grad_a.append(np.sqrt(r.grad_a_sq.max()))
    assert grad_a[0] < grad_a[1] < grad_a[2]
    assert grad_a[2] >= 10 * grad_a[0]


def test_binary_identities_reject_unnormalised_attention():
    with pytest.raises(ValueError):
        binary_grad_identities(np.ones((2, 2)), [0.6, 0.6], [1.0, 1.0], 1)
    with pytest.raises(ValueError):
        binary_grad_identities(np.ones((2, 2)), [0.5, 0.5], [1.0, 1.0], 0)


def test_expand_head_preserves_old_logits():
    rng = np.random.default_rng(0)
    phi = LinearHead(rng.normal(size=(2, 4)), rng.normal(size=2))
    grown = expand_head(phi, 2)
    assert grown.n_classes == 4
    np.testing.assert_array_equal(grown.weight[:2], phi.weight)
    np.testing.assert_array_equal(grown.bias[2:], 0)
    for _ in range(5):
        z = rng.normal(size=4)
        np.testing.assert_array_equal(forward_classifier(z, grown)[:2], forward_classifier(z, phi))


def test_expand_head_by_zero_is_identity():
    phi = LinearHead(np.ones((2, 3)), [1.0, 2.0])
    same = expand_head(phi, 0)
    np.testing.assert_array_equal(same.weight, phi.weight)
    np.testing.assert_array_equal(same.bias, phi.bias)


def test_expand_twice_equals_expand_once():
    phi = LinearHead(np.arange(6.0).reshape(2, 3), [1.0, 2.0])
    a = expand_head(expand_head(phi, 1), 1)
    b = expand_head(phi, 2)
    z = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(forward_classifier(z, a), forward_classifier(z, b))


def test_predict_argmax_and_ties():
    theta = GatedAttention(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1))
    H = np.zeros((2, 1))
    assert predict(H, theta, LinearHead(np.zeros((3, 1)), [0.1, 0.9, 0.2])) == 1
    assert predict(H, theta, LinearHead(np.zeros((2, 1)), [0.5, 0.5])) == 0


@pytest.mark.parametrize("seed", range(5))
def test_predict_is_composition(seed):
    H, theta, phi, _ = random_instance(seed, N=5, C=3)
    logits = forward_classifier(forward_attention(H, theta).bag_feature, phi)
    assert predict(H, theta, phi) == int(np.argmax(logits))


def test_bag_validation():
    with pytest.raises(ValueError):
        Bag(np.zeros((0, 3)), 0)
    with pytest.raises(ValueError):
        Bag(np.array([[np.nan]]), 0)


def test_checkpoint_roundtrip(tmp_path):
    model = MilModel.init(5, 4, 3, RngStream(1))
    path = save_checkpoint(model, tmp_path / "m.milm", {"seed": 1, "session": 0})
    loaded, meta = load_checkpoint(path)
    for p, q in zip(model.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(p, q)
    assert meta == {"seed": 1, "session": 0}
    raw = path.read_bytes()
    assert raw[:4] == b"MILM"
    assert len(raw) == 20 + 8 * (2 * 4 * 5 + 4 + 3 * 5 + 3)


def test_checkpoint_format_errors():
    raw = checkpoint_bytes(MilModel.init(2, 2, 2, RngStream(0)))
    with pytest.raises(FormatError, match="bad magic"):
        model_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="offset"):
        model_from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="version"):
        model_from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])


def test_init_bounds_and_zero_biases():
    model = MilModel.init(16, 8, 3, RngStream(0))
    assert np.all(np.abs(model.attention.V1) <= 1 / 4)
    assert np.all(np.abs(model.attention.w) <= 1 / math.sqrt(8))
    np.testing.assert_array_equal(model.classifier.bias, 0)
