import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mgroute import diffcore as dc


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def rand(*shape, seed=0, grad=True):
    return dc.tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=grad)


def check_grads(fn, params, tol=1e-4):
    """Autograd against central differences for a scalar ``fn()``."""
    for p in params:
        p.grad = None
    dc.backward(fn(), params)
    numeric = dc.finite_difference_grad(fn, params)
    for p, n in zip(params, numeric):
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        err = dc.relative_error(analytic, n).max().item()
        assert err < tol, err


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    out = dc.matmul(dc.tensor(a), dc.tensor(b)).numpy()
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.matmul(rand(3, 4), rand(3, 4))
    with pytest.raises(dc.ShapeError):
        dc.add(rand(3, 4), rand(2, 4))
    with pytest.raises(dc.ShapeError):
        dc.lstm_cell(rand(2, 3), rand(2, 4), rand(2, 4), rand(3, 8), rand(4, 16), rand(16))
    with pytest.raises(dc.ShapeError):
        dc.softmax(dc.tensor([1.0, 2.0]), mask=torch.tensor([False, False]))


def test_non_finite_trips():
    with pytest.raises(dc.NonFiniteError):
        dc.log(dc.tensor([0.0, 1.0]))
    with pytest.raises(dc.NonFiniteError):
        dc.exp(dc.tensor([1000.0]))
    w = dc.tensor([1.0], requires_grad=True)
    with pytest.raises(dc.NonFiniteError):
        dc.backward((w * float("inf")).sum(), [w])


def test_softmax_uniform_and_masked():
    x = dc.tensor(np.full((3, 5), 2.5))
    assert torch.allclose(dc.softmax(x, axis=-1), torch.full((3, 5), 0.2, dtype=dc.DTYPE), atol=1e-15)
    mask = torch.tensor([True, False, True, False, True])
    p = dc.softmax(dc.tensor([1.0, 50.0, 2.0, -3.0, 0.0]), mask=mask)
    assert p[1] == 0 and p[3] == 0
    assert abs(p.sum().item() - 1.0) < 1e-15
    lp = dc.log_softmax(dc.tensor([1.0, 50.0, 2.0, -3.0, 0.0]), mask=mask)
    assert torch.allclose(lp[mask].exp(), p[mask], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(xs, shift):
    a = dc.softmax(dc.tensor(xs))
    b = dc.softmax(dc.tensor(xs) + shift)
    assert torch.allclose(a, b, atol=1e-12)


def test_layer_norm_moments():
    x = rand(6, 9, seed=1, grad=False) * 7 + 3
    y = dc.layer_norm(x, eps=0.0)
    assert y.mean(-1).abs().max().item() < 1e-10
    assert (y.var(-1, unbiased=False) - 1).abs().max().item() < 1e-10


def test_masked_sum_and_mean():
    x = dc.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    mask = torch.tensor([[True, False, True], [False, False, True]])
    assert dc.masked_sum(x, mask, axis=1).tolist() == [4.0, 6.0]
    assert dc.mean(x, axis=0).tolist() == [2.5, 3.5, 4.5]
    assert dc.sum(x).item() == 21.0
    assert dc.embedding_lookup(x, torch.tensor([1, 1, 0])).tolist()[0] == [4.0, 5.0, 6.0]
    assert dc.masked_fill(x, mask, 0.0).tolist() == [[0.0, 2.0, 0.0], [4.0, 5.0, 0.0]]
    assert dc.concat([x, x], axis=0).shape == (4, 3)


def test_quadratic_gradient_is_two_w():
    w = rand(4, 3, seed=2)
    dc.backward(dc.sum(dc.mul(w, w)), [w])
    assert torch.allclose(w.grad, 2 * w.detach(), atol=0)


def test_constant_loss_zero_gradient():
    w = rand(3, seed=3)
    loss = dc.sum(w * 0.0) + 5.0
    dc.backward(loss, [w])
    assert torch.all(w.grad == 0)


def test_backward_needs_scalar():
    w = rand(3, seed=4)
    with pytest.raises(dc.ShapeError):
        dc.backward(w * 2, [w])


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: dc.matmul(a, b.T),
        lambda a, b: dc.add(a, b),
        lambda a, b: dc.mul(a, b),
        lambda a, b: dc.concat([a, b], axis=0),
        lambda a, b: dc.softmax(a, axis=-1) * b,
        lambda a, b: dc.log_softmax(a, axis=0) * b,
        lambda a, b: dc.tanh(a) * b,
        lambda a, b: dc.sigmoid(a) + b,
        lambda a, b: dc.relu(a + 0.05) * b,
        lambda a, b: dc.log(a * a + 1.0) * b,
        lambda a, b: dc.exp(a) - b,
        lambda a, b: dc.layer_norm(a) * b,
        lambda a, b: dc.mean(a, axis=1) * dc.sum(b, axis=1),
        lambda a, b: dc.masked_fill(a, b > 0, 0.0) * b,
    ],
)
def test_op_gradients_match_finite_differences(op):
    a, b = rand(3, 4, seed=5), rand(3, 4, seed=6)
    weights = dc.tensor(np.random.default_rng(7).standard_normal(64))

    def fn():
        out = op(a, b).reshape(-1)
        return (out * weights[: out.numel()]).sum()

    check_grads(fn, [a, b])


def test_masked_softmax_gradient():
    x = rand(4, 6, seed=8)
    mask = torch.from_numpy(np.random.default_rng(9).random((4, 6)) < 0.6)
    mask[:, 0] = True
    w = rand(4, 6, seed=10, grad=False)
    check_grads(lambda: (dc.softmax(x, axis=-1, mask=mask) * w).sum(), [x])


def test_lstm_cell_gradient_and_length_one():
    lstm = dc.LSTM(3, 4, gen(1))
    xs = rand(2, 1, 3, seed=11)
    out = lstm(xs)
    h, c = dc.lstm_cell(xs[:, 0], torch.zeros(2, 4, dtype=dc.DTYPE), torch.zeros(2, 4, dtype=dc.DTYPE), lstm.w_ih, lstm.w_hh, lstm.b)
    assert torch.equal(out[:, 0], h)
    seq = rand(2, 5, 3, seed=12)
    w = rand(2, 5, 4, seed=13, grad=False)
    params = [seq, *lstm.parameters()]
    check_grads(lambda: (lstm(seq, reverse=True) * w).sum(), params)


def test_lstm_cell_matches_hand_gates():
    rng = np.random.default_rng(14)
    x, h, c = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
    w_ih, w_hh, b = rng.standard_normal((3, 8)), rng.standard_normal((2, 8)), rng.standard_normal(8)
    z = x @ w_ih + h @ w_hh + b
    sig = lambda v: 1 / (1 + np.exp(-v))
    c_ref = sig(z[2:4]) * c + sig(z[0:2]) * np.tanh(z[4:6])
    h_ref = sig(z[6:8]) * np.tanh(c_ref)
    h2, c2 = dc.lstm_cell(*(dc.tensor(a) for a in (x, h, c, w_ih, w_hh, b)))
    assert np.allclose(h2.numpy(), h_ref, atol=1e-14) and np.allclose(c2.numpy(), c_ref, atol=1e-14)


def test_composed_layers_gradients():
    g = gen(2)
    mlp, ln, lin = dc.MLP(5, 7, 3, g), dc.LayerNorm(3), dc.Linear(3, 2, g)
    x = rand(4, 5, seed=15)
    w = rand(4, 2, seed=16, grad=False)
    params = [x, *mlp.parameters(), *ln.parameters(), *lin.parameters()]
    check_grads(lambda: (lin(ln(mlp(x))) * w).sum(), params)


def test_uniform_init_bounds_and_determinism():
    a = dc.uniform_init((50, 40), 25, gen(3))
    b = dc.uniform_init((50, 40), 25, gen(3))
    assert torch.equal(a, b)
    assert a.abs().max().item() <= 0.2
    assert a.abs().max().item() > 0.19
    assert torch.all(dc.Linear(4, 3, gen(0)).bias == 0)


def named(*tensors):
    return [(f"p{i}", torch.nn.Parameter(t.detach().clone())) for i, t in enumerate(tensors)]


def test_adam_zero_grad_zero_decay_is_noop():
    params = named(rand(3, 2, seed=17))
    before = params[0][1].detach().clone()
    opt = dc.Adam(params, lr=1e-2, weight_decay=0.0)
    params[0][1].grad = torch.zeros_like(before)
    dc.adam_step(opt)
    assert torch.equal(params[0][1].detach(), before)


def test_adam_defaults():
    opt = dc.Adam(named(rand(2, seed=18)))
    assert opt.lr == 1e-4 and opt.weight_decay == 1e-6


def test_adam_matches_library_adamw():
    ours = named(rand(4, 3, seed=19), rand(5, seed=20))
    ref = named(rand(4, 3, seed=19), rand(5, seed=20))
    opt = dc.Adam(ours, lr=3e-3, weight_decay=1e-2)
    lib = torch.optim.AdamW([p for _, p in ref], lr=3e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(21)
    for _ in range(25):
        for (_, a), (_, b) in zip(ours, ref):
            g = torch.from_numpy(rng.standard_normal(tuple(a.shape)))
            a.grad, b.grad = g.clone(), g.clone()
        opt.step()
        lib.step()
    for (_, a), (_, b) in zip(ours, ref):
        assert torch.allclose(a, b, atol=1e-12, rtol=0)


def test_adam_scalar_convergence():
    params = named(dc.tensor([1.0]))
    w = params[0][1]
    opt = dc.Adam(params, lr=1e-3, weight_decay=0.0)
    for step in range(10_000):
        opt.zero_grad()
        dc.backward((w * w).sum(), [w])
        opt.step()
        if abs(w.item()) < 1e-3:
            break
    assert abs(w.item()) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    params = named(rand(3, 4, seed=22), rand(7, seed=23), dc.tensor(2.5))
    opt = dc.Adam(params, lr=1e-2)
    for _, p in params:
        p.grad = torch.ones_like(p)
    opt.step()
    path = tmp_path / "x.ckpt"
    dc.save_checkpoint(path, dict(params), opt, meta={"epoch": 3})
    tensors, header = dc.load_checkpoint(path)
    assert header["meta"] == {"epoch": 3} and header["adam_step"] == 1 and header["version"] == 1
    for name, p in params:
        assert torch.equal(tensors[name], p.detach())
        assert torch.equal(tensors[f"adam.m.{name}"], opt.m[name])
        assert torch.equal(tensors[f"adam.v.{name}"], opt.v[name])
    raw = path.read_bytes()
    assert raw[:8] == dc.MAGIC
    assert not (tmp_path / "x.ckpt.tmp").exists()
    (tmp_path / "bad").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        dc.load_checkpoint(tmp_path / "bad")
