import threading

import numpy as np
import pytest

from _gradcheck import max_relative_error, projected
from volpose.autonet import (
    NetSpec,
    Tape,
    Tensor,
    build_coord_net,
    build_network,
    build_stacked_net,
    load_checkpoint,
    load_into,
    ops,
    save_checkpoint,
)
from volpose.errors import ConfigError, ShapeMismatch
from volpose.heatmap import loss_coords, loss_volume
from volpose.skeleton import Skeleton, make_toy_skeleton
from volpose.voxelgrid import VoxelGrid

TOL = 1e-3


def check(loss_fn, tensors):
    rep = max_relative_error(loss_fn, tensors)
    total = sum(t.value.size for t in tensors)
    assert rep.scored == min(64, total), f"only {rep.scored} smooth coordinates"
    assert rep < TOL


def t64(arr, grad=True):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# -- primitives ---------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    assert np.array_equal(ops.conv2d(x, w).value, x.value)
    w3 = np.zeros((3, 3, 3, 3))
    w3[np.arange(3), np.arange(3), 1, 1] = 1.0
    assert np.allclose(ops.conv2d(x, Tensor(w3)).value, x.value)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ops.conv2d(t64(x, False), t64(w, False), t64(b, False)).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 5))
    for o in range(3):
        for y in range(4):
            for xx in range(5):
                ref[0, o, y, xx] = np.sum(xp[0, :, y:y + 3, xx:xx + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pool_then_upsample_constant(rng):
    x = Tensor(np.full((1, 2, 4, 4), 3.25))
    out = ops.upsample_2x(ops.max_pool_2x(x))
    assert np.array_equal(out.value, x.value)


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeMismatch):
        ops.add(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeMismatch):
        ops.max_pool_2x(Tensor(np.zeros((1, 1, 3, 4))))
    with pytest.raises(ShapeMismatch):
        ops.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def _primitive_cases(rng):
    x = t64(rng.normal(size=(2, 3, 4, 4)))
    w3 = t64(rng.normal(size=(2, 3, 3, 3)))
    w1 = t64(rng.normal(size=(2, 3, 1, 1)))
    b = t64(rng.normal(size=2))
    xr = t64(away_from_zero(rng, (2, 3, 4, 4)))
    # distinct values spaced well above the step so no window changes its winner
    xp = t64(rng.permutation(96).reshape(2, 3, 4, 4) * 0.01)
    y = t64(rng.normal(size=(2, 3, 4, 4)))
    f = t64(rng.normal(size=(5, 6)))
    fw = t64(rng.normal(size=(4, 6)))
    fb = t64(rng.normal(size=4))
    return {
        "conv3x3": (lambda: ops.conv2d(x, w3, b), [x, w3, b]),
        "conv1x1": (lambda: ops.conv2d(x, w1, b), [x, w1, b]),
        "relu": (lambda: ops.relu(xr), [xr]),
        "max_pool_2x": (lambda: ops.max_pool_2x(xp), [xp]),
        "upsample_2x": (lambda: ops.upsample_2x(x), [x]),
        "add": (lambda: ops.add(x, y, x), [x, y]),
        "fully_connected": (lambda: ops.fully_connected(f, fw, fb), [f, fw, fb]),
        "reshape": (lambda: ops.reshape(x, (2, 48)), [x]),
        "global_avg_pool": (lambda: ops.global_avg_pool(x), [x]),
        "scale": (lambda: ops.scale(x, -1.5), [x]),
    }


@pytest.mark.parametrize("name", list(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradient(name):
    fn, tensors = _primitive_cases(np.random.default_rng(11))[name]
    check(projected(fn), tensors)


def test_squared_error_gradient(rng):
    p = t64(rng.normal(size=(3, 4)))
    target = rng.normal(size=(3, 4))
    check(lambda: ops.squared_error(p, target, 0.3), [p])


def test_no_graph_outside_tape(rng):
    x = t64(rng.normal(size=(1, 1, 2, 2)))
    out = ops.relu(x)
    assert not out.requires_grad


def test_shared_input_accumulates(rng):
    x = t64(rng.normal(size=(2, 2)))
    with Tape() as tape:
        loss = ops.squared_error(ops.add(x, x), np.zeros((2, 2)))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 8.0 * x.value)


def test_tapes_are_thread_local(rng):
    x = t64(rng.normal(size=(2, 2)))
    seen = {}

    def worker():
        seen["graph"] = ops.relu(x).requires_grad

    with Tape():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
    assert seen["graph"] is False


# -- networks -----------------------------------------------------------------

def micro_skeleton():
    return Skeleton(parent=[-1, 0], limb_length=[0.0, 100.0])


def micro_net(ladder=(1, 4), fuse=True, head_init="glorot", seed=3):
    grid = VoxelGrid(8, 8, 4)
    return build_stacked_net(micro_skeleton(), grid, ladder, fuse, input_shape=(1, 16, 16),
                             width=4, stem_width=4, hg_depth=2, dtype="float64",
                             head_init=head_init, seed=seed)


def generic_biases(net, seed=0):
    # zero biases put every unit fed only by dead activations exactly on the
    # relu kink, where finite differences are meaningless
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.endswith(".b"):
            p.value = rng.uniform(-0.2, 0.2, size=p.shape)
    return net


def _net_loss(net, batch, targets):
    def loss():
        outs = net(batch)
        total = loss_volume(outs[0], targets[0])
        for o, t in zip(outs[1:], targets[1:]):
            total = ops.add(total, loss_volume(o, t))
        return total
    return loss


@pytest.mark.parametrize("ladder,fuse", [((1, 4), True), ((4, 4), True), ((1, 4), False), ((1, 2, 4), True)])
def test_micro_network_gradient(ladder, fuse):
    rng = np.random.default_rng(5)
    net = generic_biases(micro_net(ladder, fuse))
    batch = Tensor(rng.uniform(size=(2, 1, 16, 16)), dtype=np.float64)
    targets = [rng.uniform(size=o.shape) for o in net(batch)]
    check(_net_loss(net, batch, targets), net.parameters())


def test_micro_coord_network_gradient():
    rng = np.random.default_rng(6)
    net = build_coord_net(micro_skeleton(), input_shape=(1, 16, 16), out_size=8, width=4,
                          stem_width=4, hg_depth=2, dtype="float64", seed=2)
    generic_biases(net)
    batch = Tensor(rng.uniform(size=(2, 1, 16, 16)), dtype=np.float64)
    gt = rng.normal(size=(2, 2, 3))
    fn = lambda: loss_coords(net(batch)[0], gt)
    assert net(batch)[0].shape == (2, 6)
    check(fn, net.parameters())


def test_stage_head_channels():
    toy = make_toy_skeleton()
    net = build_stacked_net(toy, VoxelGrid(16, 16, 16), (1, 16), True, width=8, stem_width=4)
    outs = net(np.zeros((1, 1, 64, 64), dtype=np.float32))
    assert [o.shape for o in outs] == [(1, 12, 16, 16), (1, 192, 16, 16)]
    coord = build_coord_net(toy, width=8, stem_width=4)
    assert coord(np.zeros((3, 1, 64, 64), dtype=np.float32))[0].shape == (3, 36)


def test_ladder_heads_at_full_depth():
    toy = make_toy_skeleton()
    grid = VoxelGrid(16, 16, 64)
    c2f = build_stacked_net(toy, grid, (1, 64), True, width=4, stem_width=4)
    naive = build_stacked_net(toy, grid, (64, 64), True, width=4, stem_width=4)
    dec = build_stacked_net(toy, grid, (1, 64), False, width=4, stem_width=4)
    assert [st.head_channels for st in c2f.spec.stages] == [12, 768]
    assert [st.head_channels for st in naive.spec.stages] == [768, 768]
    assert not any(name.startswith("fuse") for name in dec.params)
    assert "remap0.w" in dec.params


def test_build_errors():
    toy = make_toy_skeleton()
    with pytest.raises(ConfigError):
        build_stacked_net(toy, VoxelGrid(16, 16, 16), (1, 8), True)
    with pytest.raises(ConfigError):
        build_stacked_net(toy, VoxelGrid(16, 8, 16), (16,), True)
    with pytest.raises(ConfigError):
        build_stacked_net(toy, VoxelGrid(24, 24, 16), (16,), True)
    net = micro_net()
    with pytest.raises(ShapeMismatch):
        net(np.zeros((1, 1, 8, 8)))


def test_forward_deterministic():
    net = micro_net()
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
    a = [o.value.copy() for o in net(x)]
    b = [o.value for o in net(x)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    same = micro_net()
    assert all(np.array_equal(p, q.value) for p, q in zip(a, same(x)))


def test_zero_input_zero_heads_give_zero_output():
    net = micro_net(head_init="zero")
    outs = net(np.zeros((1, 1, 16, 16)))
    assert all(not o.value.any() for o in outs)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(1)
    for ladder, fuse in [((1, 4), True), ((1, 2, 4), True), ((1, 4), False)]:
        net = micro_net(ladder, fuse, seed=4)
        batch = Tensor(rng.uniform(size=(4, 1, 16, 16)), dtype=np.float64)
        targets = [rng.uniform(size=o.shape) for o in net(batch)]
        net.zero_grad()
        with Tape() as tape:
            tape.backward(_net_loss(net, batch, targets)())
        dead = [n for n, p in net.params.items() if p.grad is None or not np.any(p.grad)]
        assert dead == [], f"{ladder} fuse={fuse}: {dead}"


def test_decoupled_stage_ignores_image_features():
    x = np.random.default_rng(2).uniform(size=(2, 1, 16, 16))
    dec = micro_net((1, 4), fuse=False)
    a, b = dec(x)[-1].value, dec(x, ablate_features=True)[-1].value
    assert np.array_equal(a, b)
    fused = micro_net((1, 4), fuse=True)
    assert np.abs(fused(x)[-1].value - fused(x, ablate_features=True)[-1].value).max() > 0


def test_batch_elements_independent():
    net = micro_net()
    x = np.random.default_rng(3).uniform(size=(3, 1, 16, 16))
    full = net(x)[-1].value
    for i in range(3):
        np.testing.assert_allclose(net(x[i:i + 1])[-1].value[0], full[i], rtol=0, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path):
    net = build_stacked_net(micro_skeleton(), VoxelGrid(8, 8, 4), (1, 4), True,
                            input_shape=(1, 16, 16), width=4, stem_width=4, seed=9)
    path = tmp_path / "net.vpkt"
    save_checkpoint(path, net.params)
    assert path.read_bytes()[:4] == b"VPKT"
    arrays = load_checkpoint(path)
    assert list(arrays) == list(net.params)
    for name, arr in arrays.items():
        assert arr.tobytes() == net.params[name].value.astype("<f4").tobytes()
    other = build_network(NetSpec.from_json(net.spec.to_json()))
    for p in other.parameters():
        p.value = np.zeros_like(p.value)
    load_into(other, path)
    for name in net.params:
        assert np.array_equal(other.params[name].value, net.params[name].value)


def test_netspec_json_roundtrip():
    spec = micro_net().spec
    again = NetSpec.from_json(spec.to_json())
    assert again.to_json() == spec.to_json()
