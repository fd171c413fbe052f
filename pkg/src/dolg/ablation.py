"""Ablation grids over fusion location, local-branch blocks, pooling and fusion mode.

Each grid cell trains, extracts and evaluates with the same seed and data;
only the cell's axes differ from the base configuration.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, replace

from .errors import ConfigError
from .evaluation import evaluate
from .extraction import extract_images
from .model import FUSION_LOCATIONS, POOLS, ModelConfig, build_model
from .fusion import FUSION_MODES
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationSpec:
    name: str
    fusion_location: str = "f3_only"
    global_pool: str = "gem"
    fusion_pool: str | None = None  # None -> base config value
    fusion_mode: str | None = None
    multi_atrous: bool = True
    self_attention: bool = True
    margin: float | None = None  # per-cell loss overrides
    scale: float | None = None

    def __post_init__(self):
        if self.fusion_location not in FUSION_LOCATIONS:
            raise ConfigError(f"{self.name}: unknown fusion_location {self.fusion_location!r}")
        if self.global_pool not in POOLS or self.fusion_pool not in POOLS + (None,):
            raise ConfigError(f"{self.name}: pooling must be one of {POOLS}")
        if self.fusion_mode not in FUSION_MODES + (None,):
            raise ConfigError(f"{self.name}: unknown fusion_mode {self.fusion_mode!r}")
        if self.fusion_location == "global_only":
            if self.fusion_pool is not None or self.fusion_mode is not None:
                raise ConfigError(f"{self.name}: global_only has no fusion module; "
                                  "fusion_pool / fusion_mode cannot be set")
            if not (self.multi_atrous and self.self_attention):
                raise ConfigError(f"{self.name}: global_only has no local branch to ablate")

    def model_config(self, base: ModelConfig) -> ModelConfig:
        return replace(
            base,
            fusion_location=self.fusion_location,
            global_pool=self.global_pool,
            fusion_pool=self.fusion_pool or base.fusion_pool,
            fusion_mode=self.fusion_mode or base.fusion_mode,
            multi_atrous=self.multi_atrous,
            self_attention=self.self_attention,
        )

    def train_config(self, base: TrainConfig) -> TrainConfig:
        changes = {k: v for k, v in (("margin", self.margin), ("scale", self.scale)) if v is not None}
        return replace(base, **changes)


GRIDS = {
    "table3": [
        AblationSpec("Global only", fusion_location="global_only"),
        AblationSpec("Fuse f4-only", fusion_location="f4_only"),
        AblationSpec("Fuse f3-only", fusion_location="f3_only"),
        AblationSpec("both f3&f4", fusion_location="both_f3_f4"),
    ],
    "table4": [
        AblationSpec("w/o Local", fusion_location="global_only"),
        AblationSpec("w/o MultiAtrous", multi_atrous=False),
        AblationSpec("w/o Self-ATT", self_attention=False),
        AblationSpec("Full Model"),
    ],
    "table5": [
        AblationSpec("GeM / GeM", global_pool="gem", fusion_pool="gem"),
        AblationSpec("AVG / AVG", global_pool="average", fusion_pool="average"),
        AblationSpec("GeM / AVG", global_pool="gem", fusion_pool="average"),
        AblationSpec("AVG / GeM", global_pool="average", fusion_pool="gem"),
    ],
    "table6": [
        AblationSpec("Concatenation", fusion_mode="concatenation", margin=2.0, scale=30.0),
        AblationSpec("Hadamard", fusion_mode="hadamard"),
        AblationSpec("orthogonal", fusion_mode="orthogonal"),
    ],
}


def load_grid(source):
    """A preset name from ``GRIDS`` or a JSON file holding a list of spec objects."""
    if source in GRIDS:
        return list(GRIDS[source])
    if not os.path.exists(source):
        raise ConfigError(f"grid spec file not found: {source}")
    with open(source, encoding="utf-8") as fh:
        raw = json.load(fh)
    if isinstance(raw, dict) and "grid" in raw:
        raw = raw["grid"]
    if not isinstance(raw, list):
        raise ConfigError("grid spec file must hold a list of ablation specs")
    specs = []
    for i, item in enumerate(raw):
        try:
            specs.append(AblationSpec(**item))
        except TypeError as exc:
            raise ConfigError(f"grid entry {i}: {exc}") from None
    return specs


@dataclass
class Benchmark:
    """Everything a grid cell needs besides the spec."""

    dataset: object
    gt: object
    db_records: list
    query_records: list
    scales: tuple = (0.7071, 1.0, 1.4142)
    strict: bool = True
    crop_queries: bool = True


def run_cell(spec: AblationSpec, bench: Benchmark, base_model: ModelConfig, base_train: TrainConfig, out_dir=None):
    mcfg = spec.model_config(base_model)
    tcfg = spec.train_config(base_train)
    model = build_model(mcfg, seed=tcfg.seed)
    result = train(bench.dataset, model, tcfg, out_dir=out_dir)
    crops = bench.gt.crops() if bench.crop_queries else None
    db = extract_images(bench.db_records, model, bench.scales, bench.strict)
    queries = extract_images(bench.query_records, model, bench.scales, bench.strict, crops)
    report = evaluate(bench.gt, db, queries)
    final = result.report[-1]
    return {
        "name": spec.name,
        "spec": asdict(spec),
        "config_hash": mcfg.digest(),
        "train_acc": final["train_acc"],
        "val_acc": final["val_acc"],
        "final_loss": final["loss"],
        **{k: v for k, v in report.to_dict().items() if k not in ("per_query", "excluded")},
    }


def run_grid(specs, bench: Benchmark, base_model: ModelConfig, base_train: TrainConfig, out_dir=None):
    rows = []
    for i, spec in enumerate(specs):
        log.info("ablation cell %d/%d: %s", i + 1, len(specs), spec.name)
        cell_dir = os.path.join(out_dir, f"cell{i:02d}") if out_dir else None
        rows.append(run_cell(spec, bench, base_model, base_train, cell_dir))
    return rows


def format_table(rows, title="Ablation"):
    """Markdown table with the E / M / H mAP columns plus mP@10, all in percent."""
    lines = [f"### {title}", "",
             "| Method | E | M | H | mP@10 M | mP@10 H | train acc |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        cells = [r["map_easy"], r["map_medium"], r["map_hard"], r["mp10_medium"], r["mp10_hard"], r["train_acc"]]
        lines.append(f"| {r['name']} | " + " | ".join(f"{100 * v:.2f}" for v in cells) + " |")
    return "\n".join(lines) + "\n"
