"""Fast invariant checks runnable from the command line (``dolg selftest``)."""

import math
import os
import tempfile

import numpy as np
import torch

from .evaluation import average_precision
from .extraction import DescriptorStore, store_read, store_write
from .fusion import OrthogonalFusion, orthogonal_component, pooled_orthogonal_form
from .global_branch import gem_pool
from .gradcheck import max_gradient_error
from .local_branch import LocalBranch, MultiAtrousConfig
from .training import arcface_adjust, arcface_loss


def _orthogonality(rng):
    worst = 0.0
    for c in (4, 64, 256):
        f_l = torch.from_numpy(rng.normal(size=(20, c, 3, 3)))
        f_g = torch.from_numpy(rng.normal(size=(20, c)))
        orth = orthogonal_component(f_l, f_g)
        dots = torch.einsum("bchw,bc->bhw", orth, f_g).abs()
        bound = f_l.norm(dim=1) * f_g.norm(dim=1)[:, None, None]
        worst = max(worst, (dots / bound).max().item())
    return worst <= 1e-5, f"max |orth.f_g| / (|f_l||f_g|) = {worst:.2e}"


def _pooled_identity(rng):
    fusion = OrthogonalFusion(16).double().eval()
    worst = 0.0
    for _ in range(10):
        f_l = torch.from_numpy(rng.normal(size=(2, 16, 4, 5)))
        f_g = torch.from_numpy(rng.normal(size=(2, 16)))
        with torch.no_grad():
            a, b = fusion(f_l, f_g), pooled_orthogonal_form(f_l, f_g, fusion.fc)
        worst = max(worst, ((a - b).norm() / b.norm()).item())
    return worst <= 1e-5, f"max relative gap {worst:.2e}"


def _gem_identities(rng):
    x = torch.from_numpy(rng.uniform(0.1, 2.0, size=(8, 5, 5)))
    gap1 = ((gem_pool(x, 1.0) - x.mean(dim=(-2, -1))).abs() / x.mean(dim=(-2, -1))).max().item()
    mx = x.amax(dim=(-2, -1))
    gap64 = ((mx - gem_pool(x, 64.0)) / mx).max().item()
    return gap1 <= 1e-12 and gap64 <= 0.05, f"p=1 gap {gap1:.1e}, p=64 gap to max {gap64:.3f}"


def _gradients(rng):
    torch.manual_seed(0)
    x = torch.from_numpy(rng.uniform(0.2, 1.5, size=(2, 3, 3))).requires_grad_()
    errs = {"gem": max_gradient_error(lambda: gem_pool(x, 3.0).pow(2).sum(), [x])}

    branch = LocalBranch(4, MultiAtrousConfig(6, (1, 2, 3), 3)).double().train()
    f3 = torch.from_numpy(rng.normal(size=(2, 4, 3, 3))).requires_grad_()
    w = torch.from_numpy(rng.normal(size=(2, 6, 3, 3)))
    errs["local"] = max_gradient_error(lambda: (branch(f3)[0] * w).sum(), [f3, branch.atrous.project.weight])

    fusion = OrthogonalFusion(5, out_dim=7).double().eval()
    f_l = torch.from_numpy(rng.normal(size=(1, 5, 2, 2))).requires_grad_()
    f_g = torch.from_numpy(rng.normal(size=(1, 5))).requires_grad_()
    errs["fusion"] = max_gradient_error(lambda: fusion(f_l, f_g).pow(2).sum(), [f_l, f_g, fusion.fc.weight])

    desc = torch.from_numpy(rng.normal(size=(3, 8))).requires_grad_()
    weight = torch.from_numpy(rng.normal(size=(4, 8))).requires_grad_()
    labels = torch.tensor([0, 2, 3])
    errs["arcface"] = max_gradient_error(lambda: arcface_loss(desc, labels, weight, 0.15, 30.0), [desc, weight])
    worst = max(errs.values())
    return worst < 1e-4, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


def _arcface_values(rng):
    ok = arcface_adjust(0.3, 0, 0.15) == 0.3
    gap = abs(arcface_adjust(1.0, 1, 0.15) - math.cos(0.15))
    f = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    w = torch.tensor([[1.0, 1.0], [1.0, -1.0]], dtype=torch.float64)
    loss_gap = abs(arcface_loss(f, torch.tensor([0]), w, 0.0, 30.0).item() - math.log(2))
    return ok and gap <= 1e-10 and loss_gap <= 1e-10, f"margin gap {gap:.1e}, ln2 gap {loss_gap:.1e}"


def _brute_ap(ranked, positives, junk):
    # precision@k recounted from scratch at every relevant k, summed in rank order
    kept = [i for i in ranked if i not in junk]
    total = 0.0
    for k in range(1, len(kept) + 1):
        if kept[k - 1] in positives:
            total += sum(1 for i in kept[:k] if i in positives) / k
    return total / len(positives)


def _ap_oracle(rng):
    for _ in range(200):
        n = int(rng.integers(1, 21))
        ranked = [f"i{j}" for j in rng.permutation(n)]
        labels = rng.integers(0, 3, size=n)
        pos = {f"i{j}" for j in range(n) if labels[j] == 0}
        junk = {f"i{j}" for j in range(n) if labels[j] == 1}
        if not pos:
            continue
        if average_precision(ranked, pos, junk) != _brute_ap(ranked, pos, junk):
            return False, f"mismatch on {ranked}"
    return True, "200 random instances agree"


def _store_roundtrip(rng):
    v = rng.normal(size=(100, 512))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    store = DescriptorStore([f"id{i}" for i in range(100)], v.astype(np.float32))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s.bin")
        store_write(store, path)
        back = store_read(path)
    ok = back.ids == store.ids and back.vectors.tobytes() == store.vectors.tobytes()
    return ok, "bitwise round-trip" if ok else "round-trip mismatch"


CHECKS = [
    ("orthogonality", _orthogonality),
    ("pooled-fusion identity", _pooled_identity),
    ("gem pooling identities", _gem_identities),
    ("gradient checks", _gradients),
    ("arcface values", _arcface_values),
    ("AP oracle", _ap_oracle),
    ("store round-trip", _store_roundtrip),
]


def run(seed=0):
    """Run every check; returns a list of ``(name, passed, detail)``."""
    results = []
    for name, check in CHECKS:
        rng = np.random.default_rng(seed)
        try:
            passed, detail = check(rng)
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(passed), detail))
    return results
