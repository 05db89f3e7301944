"""Central finite-difference verification of every differentiable op.

Each suite builds a tiny scalar-valued graph, runs one tape backward, and
compares analytic gradients against central differences in float64. The
``gradcheck`` CLI subcommand and the test suite both run ``run_all``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


def finite_difference_grad(fn: Callable[[Sequence[np.ndarray]], float],
                           arrays: Sequence[np.ndarray],
                           h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of numpy arrays."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            orig = base.reshape(-1)[i]
            base.reshape(-1)[i] = orig + h
            fp = fn(arrays)
            base.reshape(-1)[i] = orig - h
            fm = fn(arrays)
            base.reshape(-1)[i] = orig
            flat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss: Callable[[Sequence[Tensor]], Tensor],
                    arrays: Sequence[np.ndarray],
                    tol: float = 1e-4,
                    h: float = 1e-5,
                    abs_floor: float = 1e-7,
                    max_entries: int | None = None,
                    entry_seed: int = 0) -> float:
    """Compare tape gradients of build_loss against central differences.

    Runs in f64. When max_entries is set, inputs larger than that get a
    random (seeded) subset of entries finite-differenced instead of all of
    them. Returns the worst relative error; raises AssertionError with a
    description when any checked entry exceeds tol.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    pick_rng = np.random.default_rng(entry_seed)
    with ad.precision("f64"):
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape():
            loss = build_loss(leaves)
        loss.backward()
        analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data)
                    for lf in leaves]

        def eval_at(arrs):
            consts = [Tensor(a.copy()) for a in arrs]
            with Tape():
                return float(build_loss(consts).data)

        worst = 0.0
        for k, base in enumerate(arrays):
            ga = analytic[k].reshape(-1)
            if max_entries is not None and base.size > max_entries:
                entries = pick_rng.choice(base.size, size=max_entries, replace=False)
            else:
                entries = range(base.size)
            flat = base.reshape(-1)
            for i in entries:
                orig = flat[i]
                flat[i] = orig + h
                fp = eval_at(arrays)
                flat[i] = orig - h
                fm = eval_at(arrays)
                flat[i] = orig
                gn = (fp - fm) / (2.0 * h)
                diff = abs(ga[i] - gn)
                rel = diff / max(abs(ga[i]), abs(gn), 1.0)
                if diff > abs_floor and rel > tol:
                    raise AssertionError(
                        f"gradient mismatch on input {k} at flat index {i}: "
                        f"analytic {ga[i]:.8g} vs finite-difference {gn:.8g} "
                        f"(rel err {rel:.3g} > {tol})")
                worst = max(worst, rel)
    return worst


# -- per-module suites ---------------------------------------------------------


def _suite_core_ops(rng: np.random.Generator) -> None:
    for kind in ("add", "sub", "mul", "div"):
        for _ in range(10):
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4,)) + (3.0 if kind == "div" else 0.0)

            def loss_fn(ts, kind=kind):
                x, y = ts
                r = ad._ew(x, y, kind)
                return (r * r).sum()

            check_gradients(loss_fn, [a, b])
    for _ in range(10):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_gradients(lambda ts: ((ts[0] @ ts[1]) * (ts[0] @ ts[1])).sum(), [a, b])
    for name, fn in ad.ACTIVATIONS.items():
        for _ in range(10):
            x = rng.normal(size=(6,)) * 2.0
            probe = rng.normal(size=6)
            check_gradients(
                lambda ts, fn=fn, probe=probe: (fn(ts[0]) * ad.Tensor(probe)).sum(), [x])
    for _ in range(10):
        x = rng.normal(size=(3, 5)) * 3.0
        w = rng.normal(size=(3, 5))
        check_gradients(lambda ts, w=w: (ad.softmax(ts[0], axis=1) * ad.Tensor(w)).sum(), [x])
    x = rng.normal(size=(4, 6))
    check_gradients(lambda ts: (ad.sqrt(ad.absolute(ts[0]) + 1.0)).sum(), [x])
    check_gradients(lambda ts: ts[0][1:3, ::2].sum() * 2.0 + ts[0].mean(), [x])
    idx = rng.integers(0, 4, size=(5, 2))
    check_gradients(lambda ts: (ad.gather_rows(ts[0], idx) * 0.5).sum(), [x])
    check_gradients(lambda ts: ad.concat([ts[0], ts[0] * 2.0], axis=1).mean(), [x])


def _suite_scene(rng: np.random.Generator) -> None:
    from . import scene

    for _ in range(5):
        raw_s = rng.normal(size=(2, 3))
        raw_q = rng.normal(size=(2, 4)) + 0.5

        def loss_fn(ts):
            sig = scene.assemble_covariance(ts[0], ts[1])
            return (sig * sig).sum() + sig.sum()

        check_gradients(loss_fn, [raw_s, raw_q])
    sh = rng.normal(size=(3, 4, 3))
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    probe = rng.normal(size=(3, 3))
    check_gradients(
        lambda ts: (scene.eval_sh(ts[0], dirs, 1) * ad.Tensor(probe)).sum(),
        [sh * 0.1])


def _suite_raster(rng: np.random.Generator) -> None:
    from . import raster
    from .scene import Camera

    cam = Camera(np.eye(4), fx=24.0, fy=24.0, cx=8.0, cy=8.0, width=16, height=16)
    m = 6
    mu = rng.uniform(-0.25, 0.25, size=(m, 3)) + np.array([0.0, 0.0, 2.0])
    sig = np.zeros((m, 3, 3))
    for i in range(m):
        a = rng.normal(size=(3, 3)) * 0.05
        sig[i] = a @ a.T + 0.01 * np.eye(3)
    color = rng.uniform(0.1, 0.9, size=(m, 3))
    opac = rng.uniform(0.3, 0.9, size=m)
    pick = rng.normal(size=(16, 16, 5))

    def loss_fn(ts):
        img, dep, wgt = raster.render(ts[0], ts[1], ts[2], ts[3], cam,
                                      background=np.zeros(3))
        full = ad.concat([img, ad.stack_cols([dep, wgt])], axis=-1)
        return (full * ad.Tensor(pick)).sum()

    check_gradients(loss_fn, [mu, sig, color, opac], tol=1e-2, h=1e-5, abs_floor=1e-6)


def _suite_features(rng: np.random.Generator) -> None:
    from . import features
    from .scene import Camera

    weights = features.init_encoder_weights(rng)
    cams = [Camera(np.eye(4), fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8),
            Camera(_shifted_pose(0.1), fx=12.0, fy=12.0, cx=4.0, cy=4.0, width=8, height=8)]
    imgs = [rng.uniform(0, 1, size=(8, 8, 3)) for _ in cams]
    pts = rng.uniform(-0.15, 0.15, size=(3, 3)) + np.array([0.0, 0.0, 1.5])
    names, arrays = features.flatten_weights(weights)
    probe = rng.normal(size=(3, features.FEATURE_DIM))

    def loss_fn(ts):
        w = features.unflatten_weights(names, ts)
        samples, flags = [], []
        for img, cam in zip(imgs, cams):
            pyr = features.build_pyramid(ad.Tensor(img), w)
            s, f = features.sample_points(pyr, pts, cam)
            samples.append(s)
            flags.append(f)
        fused = features.fuse_variance(samples, flags)
        return (fused * ad.Tensor(probe)).sum()

    check_gradients(loss_fn, arrays, h=1e-4, max_entries=8)


def _shifted_pose(dx: float) -> np.ndarray:
    pose = np.eye(4)
    pose[0, 3] = dx
    return pose


def _suite_interact(rng: np.random.Generator) -> None:
    from . import interaction

    m, k = 5, 2
    pts = rng.normal(size=(m, 3))
    block = interaction.init_attention_block(rng, hidden=8)
    graph = interaction.knn(pts, k)
    feats = rng.normal(size=(m, interaction.FEATURE_DIM)) * 0.5
    names, arrays = interaction.flatten_block(block)
    # keep the check away from ReLU kinks (fresh biases are exactly zero)
    arrays = [a + rng.normal(scale=0.05, size=a.shape) for a in arrays]
    probe = rng.normal(size=(m, interaction.FEATURE_DIM))

    def loss_fn(ts):
        f = ts[0]
        blk = interaction.unflatten_block(names, ts[1:])
        out = interaction.attend(f, pts, graph, blk)
        return (out * ad.Tensor(probe)).sum()

    check_gradients(loss_fn, [feats] + arrays, h=1e-4, max_entries=8)


def _suite_decode(rng: np.random.Generator) -> None:
    from . import decoders
    from . import scene

    m = 4
    heads = decoders.init_decoder_heads(rng, pe_bands=2, hidden=8)
    x = rng.normal(size=(m, 3))
    vdir = rng.normal(size=(m, 3))
    vdir /= np.linalg.norm(vdir, axis=1, keepdims=True)
    names, arrays = decoders.flatten_heads(heads)
    arrays = [a + rng.normal(scale=0.05, size=a.shape) for a in arrays]
    feats = rng.normal(size=(m, decoders.FEATURE_DIM)) * 0.3
    probe_rgb = rng.normal(size=(m, 3))
    probe_sig = rng.normal(size=(m, 3, 3))

    def loss_fn(ts):
        f = ts[0]
        hd = decoders.unflatten_heads(names, ts[1:])
        inp = decoders.decoder_input(x, vdir, f, pe_bands=2)
        rgb, opac = decoders.decode_appearance(inp, hd)
        scale, quat = decoders.decode_geometry(inp, hd)
        sig = scene.covariance_from_activated(scale, quat)
        return ((rgb * ad.Tensor(probe_rgb)).sum()
                + opac.sum()
                + (sig * ad.Tensor(probe_sig)).sum())

    check_gradients(loss_fn, [feats] + arrays, h=1e-4, max_entries=8)


def _suite_losses(rng: np.random.Generator) -> None:
    from . import losses

    a = rng.uniform(0.05, 0.95, size=(8, 8, 3))
    b = rng.uniform(0.05, 0.95, size=(8, 8, 3))
    check_gradients(lambda ts: losses.loss_color(ts[0], ad.Tensor(b)), [a], h=1e-4)
    d = rng.uniform(1.0, 3.0, size=(8, 8))
    prior = rng.uniform(1.0, 3.0, size=(8, 8))
    w = rng.uniform(0.6, 1.0, size=(8, 8))
    check_gradients(
        lambda ts: losses.loss_depth(ts[0], ad.Tensor(w), np.asarray(prior)), [d], h=1e-4)
    check_gradients(
        lambda ts: losses.loss_smooth(ts[0], b), [d], h=1e-4)


SUITES = [
    ("core-ops", _suite_core_ops),
    ("scene", _suite_scene),
    ("rasterizer", _suite_raster),
    ("features", _suite_features),
    ("interaction", _suite_interact),
    ("decoders", _suite_decode),
    ("losses", _suite_losses),
]


def run_all(seed: int = 3, verbose: bool = True) -> bool:
    """Run every finite-difference suite; returns True when all pass."""
    ok = True
    for name, suite in SUITES:
        rng = np.random.default_rng(seed)
        try:
            suite(rng)
            if verbose:
                print(f"gradcheck {name}: pass")
        except AssertionError as err:
            ok = False
            if verbose:
                print(f"gradcheck {name}: FAIL ({err})")
    return ok
