"""Acceptance criteria, one test per criterion; a PASS/FAIL line per criterion is
printed in the terminal summary."""

import json
import math
import random
import time

import mpmath
import numpy as np
import pytest
import torch

from dolg.ablation import GRIDS, Benchmark, format_table, run_grid
from dolg.data import make_dataset, read_manifest
from dolg.evaluation import RetrievalGroundTruth, average_precision, evaluate
from dolg.extraction import DescriptorStore, extract_images, extract_multiscale, store_read, store_write
from dolg.errors import FormatError
from dolg.fusion import OrthogonalFusion, orthogonal_component, pooled_orthogonal_form
from dolg.global_branch import gem_pool
from dolg.gradcheck import max_gradient_error
from dolg.local_branch import LocalBranch, MultiAtrousConfig
from dolg.model import ModelConfig, build_model
from dolg.training import TrainConfig, arcface_adjust, arcface_loss, train

from conftest import t64

TOY_SCALES = (0.7071, 1.0, 1.4142)


def _records(manifest):
    return [(p.rsplit("/", 1)[1].rsplit(".", 1)[0], p) for p, _ in read_manifest(manifest)]


@pytest.mark.criterion(1, "orthogonality of the fused local component (1000 pairs, C in {4, 64, 1024})")
def test_criterion_01_orthogonality():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    pairs = 0
    for c, n in ((4, 334), (64, 333), (1024, 333)):
        h, w = 3, 4
        scale_l = torch.rand(n, 1, 1, 1, generator=g) * 10
        scale_g = torch.rand(n, 1, generator=g) * 10 + 1e-2
        f_l = torch.randn(n, c, h, w, generator=g) * scale_l
        f_g = torch.randn(n, c, generator=g) * scale_g
        orth = orthogonal_component(f_l, f_g)
        dots = torch.einsum("bchw,bc->bhw", orth.double(), f_g.double()).abs()
        bound = 1e-5 * f_l.double().norm(dim=1) * f_g.double().norm(dim=1)[:, None, None]
        assert (dots <= bound).all(), f"C={c}: worst ratio {(dots / bound).max().item():.3g}"
        pairs += n
    assert pairs == 1000
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(2, "pooled simplification equals full orthogonal fusion (100 instances, 1e-5 rel)")
def test_criterion_02_pooled_equivalence():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    for i in range(100):
        c = (4, 16, 64, 256)[i % 4]
        fusion = OrthogonalFusion(c, pool="average").eval()
        h, w = torch.randint(1, 9, (2,), generator=g).tolist()
        f_l = torch.randn(2, c, h, w, generator=g) * 3
        f_g = torch.randn(2, c, generator=g) + 0.1
        with torch.no_grad():
            full = fusion(f_l, f_g)
            short = pooled_orthogonal_form(f_l, f_g, fusion.fc)
        rel = ((full - short).norm(dim=1) / full.norm(dim=1)).max().item()
        worst = max(worst, rel)
    assert worst <= 1e-5, f"worst relative gap {worst:.3g}"
    assert time.perf_counter() - start < 10


@pytest.mark.criterion(3, "GeM p=1 equals average (1e-12); GeM p=64 within 5% of max")
def test_criterion_03_pooling_identities():
    rng = np.random.default_rng(3)
    x = t64(rng.uniform(0.01, 5.0, size=(64, 7, 7)))
    assert (gem_pool(x, 1.0) - x.mean(dim=(-2, -1))).abs().max().item() <= 1e-12
    # distinct entries; 25 entries keep the n**(-1/64) worst case under 5%
    y = t64(np.stack([rng.permutation(np.linspace(0.05, 1.0, 25)).reshape(5, 5) * rng.uniform(0.5, 4)
                      for _ in range(64)]))
    y = y + t64(rng.uniform(0, 1e-3, size=y.shape))
    mx = y.amax(dim=(-2, -1))
    gap = ((mx - gem_pool(y, 64.0)) / mx)
    assert (gap >= 0).all() and (gap <= 0.05).all(), f"worst gap {gap.max().item():.4f}"


@pytest.mark.criterion(4, "analytic vs finite-difference gradients at 64-bit (< 1e-4)")
def test_criterion_04_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    x = t64(rng.uniform(0.2, 2.0, size=(2, 3, 4, 4))).requires_grad_()
    errs = {"gem": max_gradient_error(lambda: gem_pool(x, 3.0).pow(2).sum(), [x])}

    branch = LocalBranch(4, MultiAtrousConfig(6, (1, 2, 3), 3)).double().train()
    f3 = t64(rng.normal(size=(2, 4, 3, 3))).requires_grad_()
    wl = t64(rng.normal(size=(2, 6, 3, 3)))
    errs["local"] = max_gradient_error(lambda: (branch(f3)[0] * wl).sum(),
                                       [f3, branch.atrous.project.weight, branch.attn.attention.weight])

    fusion = OrthogonalFusion(4, out_dim=6).double().eval()
    f_l = t64(rng.normal(size=(2, 4, 3, 3))).requires_grad_()
    f_g = t64(rng.normal(size=(2, 4)) + 1.0).requires_grad_()
    wf = t64(rng.normal(size=(2, 6)))
    errs["fusion"] = max_gradient_error(lambda: (fusion(f_l, f_g) * wf).sum(), [f_l, f_g, fusion.fc.weight])

    desc = t64(rng.normal(size=(4, 6))).requires_grad_()
    weight = t64(rng.normal(size=(5, 6))).requires_grad_()
    labels = torch.tensor([0, 2, 4, 1])
    errs["arcface"] = max_gradient_error(lambda: arcface_loss(desc, labels, weight, 0.15, 30.0), [desc, weight])
    assert all(e < 1e-4 for e in errs.values()), errs
    assert time.perf_counter() - start < 120


@pytest.mark.criterion(5, "ArcFace unit values: identity off-class, cos(0.15), ln 2")
def test_criterion_05_arcface_values():
    for s in (-1.0, -0.3, 0.0, 0.42, 1.0):
        assert arcface_adjust(s, 0, 0.15) == s
    mpmath.mp.dps = 40
    cos_m = float(mpmath.cos(mpmath.mpf("0.15")))
    assert abs(arcface_adjust(1.0, 1, 0.15) - cos_m) <= 1e-10
    assert abs(arcface_adjust(1.0 + 1e-12, 1, 0.15) - cos_m) <= 1e-10
    loss = arcface_loss(t64([[1.0, 0.0]]), torch.tensor([0]), t64([[0.0, 1.0], [0.0, -1.0]]), 0.0, 30.0)
    assert abs(loss.item() - float(mpmath.log(2))) <= 1e-10


def _oracle_ap(ranked, positives, junk):
    total = 0.0
    for idx, image_id in enumerate(ranked):
        if image_id in positives:
            r = sum(1 for i in ranked[:idx + 1] if i not in junk)
            total += sum(1 for i in ranked[:idx + 1] if i in positives) / r
    return total / len(positives)


@pytest.mark.criterion(6, "AP equals a brute-force oracle on 500 instances; junk removal invariance")
def test_criterion_06_ap_oracle():
    rng = np.random.default_rng(6)
    done = 0
    while done < 500:
        n = int(rng.integers(1, 21))
        ranked = [f"i{j}" for j in rng.permutation(n)]
        labels = rng.integers(0, 3, size=n)
        pos = {f"i{j}" for j in range(n) if labels[j] == 0}
        junk = {f"i{j}" for j in range(n) if labels[j] == 1}
        if not pos:
            continue
        ap = average_precision(ranked, pos, junk)
        assert ap == _oracle_ap(ranked, pos, junk), ranked
        assert ap == average_precision([i for i in ranked if i not in junk], pos)
        done += 1


@pytest.mark.slow
@pytest.mark.criterion(7, "toy end-to-end: >= 95% train accuracy in 50 epochs, <= 15 min, finite metrics")
def test_criterion_07_toy_end_to_end(toy_paths, tmp_path, record_property):
    start = time.perf_counter()
    dataset = make_dataset(read_manifest(toy_paths["train"]), 0.8, 0)
    gt = RetrievalGroundTruth.load(toy_paths["gt"])
    tcfg = TrainConfig(batch_size=32, epochs=50, warmup_epochs=5, image_size=64, seed=0)
    summary = {}
    for name, cfg in (("orthogonal", ModelConfig()), ("global_only", ModelConfig(fusion_location="global_only"))):
        t0 = time.perf_counter()
        result = train(dataset, build_model(cfg, seed=0), tcfg, out_dir=str(tmp_path / name))
        train_time = time.perf_counter() - t0
        db = extract_images(_records(toy_paths["db"]), result.model, TOY_SCALES)
        queries = extract_images(_records(toy_paths["query"]), result.model, TOY_SCALES, crops=gt.crops())
        report = evaluate(gt, db, queries).to_dict()
        summary[name] = {"train_acc": result.report[-1]["train_acc"], "train_seconds": train_time,
                         **{k: report[k] for k in ("map_medium", "map_hard", "mp10_medium", "mp10_hard")}}
        if name == "orthogonal":
            assert summary[name]["train_acc"] >= 0.95, summary[name]
            assert train_time <= 15 * 60
            assert all(math.isfinite(report[k]) for k in ("map_medium", "map_hard", "mp10_medium", "mp10_hard"))
    summary["orthogonal_minus_global_map_medium"] = (summary["orthogonal"]["map_medium"]
                                                     - summary["global_only"]["map_medium"])
    (tmp_path / "toy_report.json").write_text(json.dumps(summary, indent=2))
    record_property("toy_report", json.dumps(summary, sort_keys=True))
    print(json.dumps(summary, indent=2))
    assert time.perf_counter() - start <= 2 * 15 * 60


@pytest.mark.criterion(8, "multi-scale extraction: unit norm, {1.0} bitwise, order invariance")
def test_criterion_08_multiscale():
    model = build_model(ModelConfig(dim=16), seed=8, dtype=torch.float64).eval()
    g = torch.Generator().manual_seed(8)
    image = torch.randn(3, 96, 128, generator=g, dtype=torch.float64)
    scale_sets = [(1.0,), (0.5, 1.0), TOY_SCALES, (0.3535, 0.5, 0.7071, 1.0, 1.4142), (1.0, 1.0), (2.0, 0.7)]
    for scales in scale_sets:
        assert abs(extract_multiscale(image, model, scales).norm().item() - 1.0) <= 1e-6
    with torch.no_grad():
        raw = model(image[None])[0]
    assert torch.equal(extract_multiscale(image, model, (1.0,)), raw / raw.norm())
    scales = [0.5, 0.7071, 1.0, 1.4142]
    ref = extract_multiscale(image, model, scales)
    rnd = random.Random(8)
    for _ in range(6):
        rnd.shuffle(scales)
        assert (extract_multiscale(image, model, scales) - ref).abs().max().item() <= 1e-12


@pytest.mark.slow
@pytest.mark.criterion(9, "table 5 and table 6 ablation grids run end-to-end, bitwise reproducible")
def test_criterion_09_ablation_grids(toy_paths, tmp_path):
    bench = Benchmark(
        dataset=make_dataset(read_manifest(toy_paths["train"]), 0.8, 0),
        gt=RetrievalGroundTruth.load(toy_paths["gt"]),
        db_records=_records(toy_paths["db"]),
        query_records=_records(toy_paths["query"]),
        scales=TOY_SCALES,
    )
    tcfg = TrainConfig(batch_size=32, epochs=4, warmup_epochs=1, image_size=64, seed=0)
    tables = []
    for attempt in range(2):
        rows5 = run_grid(GRIDS["table5"], bench, ModelConfig(), tcfg, out_dir=str(tmp_path / f"a{attempt}" / "t5"))
        rows6 = run_grid(GRIDS["table6"], bench, ModelConfig(), tcfg, out_dir=str(tmp_path / f"a{attempt}" / "t6"))
        tables.append((rows5, rows6, format_table(rows5, "table5") + format_table(rows6, "table6")))
    (rows5, rows6, text), again = tables[0], tables[1]
    assert [r["name"] for r in rows5] == ["GeM / GeM", "AVG / AVG", "GeM / AVG", "AVG / GeM"]
    assert [r["name"] for r in rows6] == ["Concatenation", "Hadamard", "orthogonal"]
    assert rows6[0]["spec"]["margin"] == 2.0 and rows6[0]["spec"]["scale"] == 30.0
    assert json.dumps(rows5 + rows6) == json.dumps(again[0] + again[1])
    assert text == again[2]
    print(text)


@pytest.mark.criterion(10, "descriptor store: bitwise round trip of 10,000 vectors, positioned errors")
def test_criterion_10_store(tmp_path):
    rng = np.random.default_rng(10)
    v = rng.normal(size=(10_000, 512))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    store = DescriptorStore([f"img{i:05d}" for i in range(10_000)], v.astype(np.float32))
    path = tmp_path / "store.bin"
    store_write(store, path)
    back = store_read(path)
    assert back.ids == store.ids and back.vectors.tobytes() == store.vectors.tobytes()
    data = path.read_bytes()
    for corrupt, offset in ((b"NOTASTORE" + data[9:], 0), (data[:1000], 24), (data + b"xx", len(data))):
        path.write_bytes(corrupt)
        with pytest.raises(FormatError) as err:
            store_read(path)
        assert err.value.offset == offset
