import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splitedge import nn
from splitedge.errors import DomainError

from helpers import LAYER_KINDS, layer_gradient_error, numeric_grad, rel_err

DESK = nn.desk_cnn()


def batch(n=4, seed=0):
    return np.random.default_rng(seed).standard_normal((n,) + DESK.input_shape)


# --- specs and parameters -------------------------------------------------

def test_dense_param_count():
    spec = nn.ModelSpec((nn.dense(4, 3),), (4,))
    assert spec.param_count == 15
    p = nn.init_params(spec, 0)
    assert p[0][0].shape == (4, 3) and p[0][1].shape == (3,)


def test_desk_cnn_param_count():
    # conv blocks 1->8->16->32->64 with 3x3 kernels, then 256->512->2
    by_hand = (9 * 1 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 64 + 64) \
        + (64 * 2 * 2 * 512 + 512) + (512 * 2 + 2)
    assert DESK.param_count == by_hand == 156994
    assert nn.flatten_params(nn.init_params(DESK, 0)).size == by_hand


def test_desk_cnn_layout():
    kinds = [layer.kind for layer in DESK.layers]
    assert kinds[:4] == ["conv2d", "relu", "dropout", "maxpool2d"]
    assert DESK.shapes[4] == (8, 16, 16)
    assert DESK.shapes[8] == (16, 8, 8)
    assert DESK.shapes[12] == (32, 4, 4)
    assert DESK.output_shape == (2,)
    conv = DESK.layers[0]
    assert (conv.kernel, conv.stride, conv.padding) == (3, 1, 1)
    assert DESK.layers[2].p == 0.5


def test_init_deterministic():
    a, b = nn.init_params(DESK, 7), nn.init_params(DESK, 7)
    np.testing.assert_array_equal(nn.flatten_params(a), nn.flatten_params(b))
    assert not np.array_equal(nn.flatten_params(a), nn.flatten_params(nn.init_params(DESK, 8)))


def test_shapes_must_compose():
    with pytest.raises(DomainError):
        nn.ModelSpec((nn.flatten(), nn.dense(10, 2)), (1, 4, 4))


def test_param_blob_round_trip():
    p = nn.init_params(DESK, 3)
    blob = nn.params_to_bytes(p)
    q = nn.params_from_bytes(blob)
    assert len(q) == len(p)
    for a, b in zip(p, q):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
    with pytest.raises(DomainError):
        nn.params_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(DomainError):
        nn.params_from_bytes(blob + b"\0")


# --- forward -------------------------------------------------------------

def test_relu_example():
    spec = nn.ModelSpec((nn.relu(),), (3,))
    _, out = nn.forward(spec, [()], np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])


def test_identity_dense():
    spec = nn.ModelSpec((nn.dense(3, 3),), (3,))
    x = np.array([[1.0, -2.0, 3.5]])
    _, out = nn.forward(spec, [(np.eye(3), np.zeros(3))], x)
    np.testing.assert_array_equal(out, x)


def test_maxpool_example():
    spec = nn.ModelSpec((nn.maxpool2d(),), (1, 2, 2))
    _, out = nn.forward(spec, [()], np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(out, [[[[4.0]]]])


def test_forward_rejects_wrong_shape():
    with pytest.raises(DomainError):
        nn.forward(DESK, nn.init_params(DESK), np.zeros((2, 1, 16, 16)))


def test_dropout_off_in_eval_and_keyed_in_train():
    p = nn.init_params(DESK, 0)
    x = batch()
    _, e1 = nn.forward(DESK, p, x, train=False, seed=1)
    _, e2 = nn.forward(DESK, p, x, train=False, seed=2)
    np.testing.assert_array_equal(e1, e2)
    _, t1 = nn.forward(DESK, p, x, train=True, seed=1, step=3)
    _, t2 = nn.forward(DESK, p, x, train=True, seed=1, step=3)
    _, t3 = nn.forward(DESK, p, x, train=True, seed=1, step=4)
    np.testing.assert_array_equal(t1, t2)
    assert not np.array_equal(t1, t3)


def test_dropout_inverted_scaling():
    spec = nn.ModelSpec((nn.dropout(0.5),), (1000,))
    _, out = nn.forward(spec, [()], np.ones((20, 1000)), train=True, seed=0)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.02


# --- loss ----------------------------------------------------------------

def test_uniform_logits_loss():
    loss, _ = nn.loss_and_grad(np.zeros((5, 2)), np.array([0, 1, 0, 1, 1]))
    assert loss == pytest.approx(np.log(2.0), abs=1e-15)


def test_saturated_logits_stable():
    loss, d = nn.loss_and_grad(np.array([[1e3, -1e3]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(d))


def test_bad_labels():
    with pytest.raises(DomainError):
        nn.loss_and_grad(np.zeros((2, 2)), np.array([0, 2]))


@given(seed=st.integers(0, 10_000))
def test_loss_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((6, 2)) * 3
    y = rng.integers(0, 2, 6)
    _, d = nn.loss_and_grad(z, y)
    fd = numeric_grad(lambda: nn.loss_and_grad(z, y)[0], z, h=1e-5)
    assert rel_err(d, fd) < 1e-6


# --- backward ------------------------------------------------------------

@pytest.mark.parametrize("kind", LAYER_KINDS)
@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(kind, seed):
    assert layer_gradient_error(kind, seed) < 1e-4


def test_zero_upstream_gives_zero_gradients():
    p = nn.init_params(DESK, 0)
    trace, out = nn.forward(DESK, p, batch())
    grads, dx = nn.backward(DESK, p, trace, np.zeros_like(out))
    assert not np.any(nn.flatten_params(grads))
    assert not np.any(dx)


def test_stale_trace_rejected():
    p = nn.init_params(DESK, 0)
    trace, out = nn.forward(DESK, p, batch())
    q = nn.sgd_step(p, [tuple(np.ones_like(a) for a in layer) for layer in p], 0.1)
    with pytest.raises(DomainError):
        nn.backward(DESK, q, trace, np.ones_like(out))
    other = nn.desk_cnn(channels=(4, 8, 16, 32))
    with pytest.raises(DomainError):
        nn.backward(other, p, trace, np.ones_like(out))


def test_full_model_gradient_spot_check():
    spec = nn.desk_cnn(input_shape=(1, 16, 16), channels=(2, 2, 2, 2), hidden=8)
    p = nn.init_params(spec, 1)
    x = np.random.default_rng(1).standard_normal((2, 1, 16, 16))
    y = np.array([0, 1])

    def loss():
        _, z = nn.forward(spec, p, x, train=True, seed=5, step=0)
        return nn.loss_and_grad(z, y)[0]

    trace, z = nn.forward(spec, p, x, train=True, seed=5, step=0)
    grads, _ = nn.backward(spec, p, trace, nn.loss_and_grad(z, y)[1])
    for i in (0, 4, len(spec.layers) - 1):
        assert rel_err(grads[i][0], numeric_grad(loss, p[i][0])) < 1e-4


# --- splitting -----------------------------------------------------------

@pytest.mark.parametrize("cut", [0, 4, 8, 12, len(DESK.layers)])
def test_split_forward_and_backward_exact(cut):
    p = nn.init_params(DESK, 2)
    x = batch(5, 2)
    client, server = nn.split_model(DESK, cut)
    assert client.layers + server.layers == DESK.layers
    cp, sp = nn.split_params(p, cut)
    t_full, full = nn.forward(DESK, p, x, True, seed=(0, 1), step=9)
    t_c, act = nn.forward(client, cp, x, True, seed=(0, 1), step=9)
    t_s, out = nn.forward(server, sp, act, True, seed=(0, 1), step=9)
    np.testing.assert_array_equal(out, full)
    dout = np.random.default_rng(0).standard_normal(full.shape)
    g_full, dx_full = nn.backward(DESK, p, t_full, dout)
    g_s, dcut = nn.backward(server, sp, t_s, dout)
    g_c, dx = nn.backward(client, cp, t_c, dcut)
    np.testing.assert_array_equal(nn.flatten_params(g_c + g_s), nn.flatten_params(g_full))
    np.testing.assert_array_equal(dx, dx_full)
    # cut-layer gradient equals what the unsplit model assigns to that activation
    _, d_at_cut = nn.backward(nn.split_model(DESK, cut)[1], sp, t_s, dout)
    np.testing.assert_array_equal(d_at_cut, dcut)


def test_split_edges():
    client, server = nn.split_model(DESK, 0)
    assert len(client) == 0 and server.layers == DESK.layers
    client, server = nn.split_model(DESK, len(DESK))
    assert len(server) == 0 and server.input_shape == DESK.output_shape
    with pytest.raises(DomainError):
        nn.split_model(DESK, len(DESK) + 1)
    with pytest.raises(DomainError):
        nn.split_model(DESK, -1)


def test_split_init_matches_slice():
    _, server = nn.split_model(DESK, 8)
    full = nn.init_params(DESK, 4)
    np.testing.assert_array_equal(nn.flatten_params(nn.init_params(server, 4)),
                                  nn.flatten_params(full[8:]))


# --- optimizers ----------------------------------------------------------

def test_adam_zero_gradient_and_step_count():
    p = nn.init_params(DESK, 0)
    s = nn.adam_init(p)
    q, s2 = nn.adam_step(p, [tuple(np.zeros_like(a) for a in layer) for layer in p], s)
    np.testing.assert_array_equal(nn.flatten_params(q), nn.flatten_params(p))
    assert s2.step == s.step + 1


def test_adam_scalar_hand_computation():
    # two steps of constant gradient 0.5 from x = 1 with lr 0.1:
    # each step moves by lr * 1 / (1 + eps / 0.5)
    p = [(np.array([1.0]),)]
    g = [(np.array([0.5]),)]
    s = nn.adam_init(p, lr=0.1)
    p, s = nn.adam_step(p, g, s)
    p, s = nn.adam_step(p, g, s)
    assert p[0][0][0] == pytest.approx(0.8000000040000006, rel=1e-15)
    assert s.step == 2


def test_adam_shape_mismatch():
    p = [(np.zeros(3),)]
    with pytest.raises(DomainError):
        nn.adam_step(p, [(np.zeros(2),)], nn.adam_init(p))


# --- FLOPs ---------------------------------------------------------------

def test_flop_examples():
    dense = nn.count_flops(nn.ModelSpec((nn.dense(4, 3),), (4,)))[0]
    assert dense.forward_flops == 24 and dense.backward_flops == 48
    conv = nn.count_flops(nn.ModelSpec((nn.conv2d(1, 8),), (1, 32, 32)))[0]
    assert conv.forward_flops == 147456


def test_flop_conventions():
    for f in nn.count_flops(DESK):
        if f.kind in ("conv2d", "dense"):
            assert f.backward_flops == 2 * f.forward_flops
        else:
            assert f.backward_flops == f.forward_flops


def test_client_share_grows_with_cut():
    total = [f.total for f in nn.count_flops(DESK)]
    shares = [sum(total[:c]) for c in (4, 8, 12)]
    assert shares[0] < shares[1] < shares[2]
    for cut in range(len(DESK) + 1):
        client, server = nn.split_model(DESK, cut)
        c = sum(f.total for f in nn.count_flops(client))
        s = sum(f.total for f in nn.count_flops(server))
        assert c + s == sum(total)
