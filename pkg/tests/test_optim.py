import numpy as np

from weakalign import numkernel as nk
from weakalign.numkernel import Adam, AdamConfig, schedule_lr


def test_schedule_endpoints():
    # ramp start, peak at end of warmup, zero at the end
    assert schedule_lr(0, 6e-5, 0.1, 1000) == 0.0
    assert schedule_lr(100, 6e-5, 0.1, 1000) == 6e-5
    assert schedule_lr(1000, 6e-5, 0.1, 1000) == 0.0


def test_schedule_linear_in_both_phases():
    peak = 6e-5
    assert np.isclose(schedule_lr(50, peak, 0.1, 1000), peak * 0.5)
    assert np.isclose(schedule_lr(550, peak, 0.1, 1000), peak * 0.5)
    for s in range(0, 1001):
        assert schedule_lr(s, peak, 0.1, 1000) >= 0.0


def test_schedule_no_warmup():
    assert schedule_lr(0, 1e-3, 0.0, 10) == 1e-3
    assert schedule_lr(5, 1e-3, 0.0, 10) == 5e-4


def test_zero_grad_fresh_state_leaves_params_unchanged():
    p = nk.tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, name="p")
    opt = Adam({"p": p}, AdamConfig(peak_lr=1e-2, warmup_frac=0.0, total_steps=10))
    p.grad = np.zeros(3, dtype=p.dtype)
    opt.step()
    assert np.array_equal(p.numpy(), np.array([1.0, -2.0, 3.0], dtype=p.dtype))


def test_adam_matches_reference_update():
    # one step against the textbook update, computed by hand here
    cfg = AdamConfig(peak_lr=0.1, warmup_frac=0.0, total_steps=100)
    val = np.array([2.0], dtype=np.float64)
    p = nk.tensor(val.copy(), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, cfg)
    g = np.array([0.5])
    p.grad = g.copy()
    opt.step()
    m = 0.1 * g  # (1-beta1)*g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    expected = val - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(p.numpy(), expected, atol=1e-12)


def test_adam_descends_on_quadratic():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(8)
    p = nk.tensor(np.zeros(8), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, AdamConfig(peak_lr=5e-2, warmup_frac=0.1, total_steps=400))
    for _ in range(400):
        opt.zero_grad()
        diff = p - nk.tensor(target, dtype=np.float64)
        loss = (diff * diff).sum()
        loss.backward()
        opt.step()
    assert float(((p.numpy() - target) ** 2).sum()) < 1e-3


def test_missing_grad_treated_as_zero():
    p = nk.tensor(np.array([1.0]), requires_grad=True)
    q = nk.tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p, "q": q}, AdamConfig(peak_lr=1e-2, warmup_frac=0.0, total_steps=10))
    p.grad = np.array([1.0], dtype=p.dtype)
    opt.step()  # q has no grad this step
    assert np.array_equal(q.numpy(), np.array([1.0], dtype=q.dtype))
    assert not np.array_equal(p.numpy(), np.array([1.0], dtype=p.dtype))


def test_state_roundtrip_preserves_updates():
    def fresh():
        p = nk.tensor(np.array([1.0, 2.0]), requires_grad=True)
        return p, Adam({"p": p}, AdamConfig(peak_lr=1e-2, warmup_frac=0.0, total_steps=50))

    p1, opt1 = fresh()
    grads = [np.array([0.3, -0.7]), np.array([-0.1, 0.2]), np.array([0.5, 0.5])]
    for g in grads[:2]:
        p1.grad = g.astype(p1.dtype)
        opt1.step()
    saved = {k: v.copy() for k, v in opt1.state_arrays().items()}
    saved_params = p1.numpy().copy()
    saved_step = opt1.step_count

    p2, opt2 = fresh()
    p2.data[:] = saved_params
    opt2.load_state_arrays(saved, saved_step)

    for p, opt in ((p1, opt1), (p2, opt2)):
        p.grad = grads[2].astype(p.dtype)
        opt.step()
    assert np.array_equal(p1.numpy(), p2.numpy())
