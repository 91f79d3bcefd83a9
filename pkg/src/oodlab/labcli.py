"""Scenario runner, report tables, figure export and the ``oodlab`` command line."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import synthgen as sg
from .analysis import (Ellipse, FeatureProjection, MetricsReport, PCAFit, SaliencyMap, confusion_metrics,
                       extract_features, model_scorer, project_groups, saliency)
from .figures import pca_scatter_svg, saliency_grid_svg, write_text
from .trainer import LossKind, TrainConfig, config_hash, predict_proba, save_model, split, train_pipeline

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EQUAL_GLOBAL_MEAN = 117.0
LOSS_LABELS = {"ce": "CE", "contrastive": "Contrastive"}
_ROLE_CODE = {"train": 1, "test": 2}
_PER_RUN_TRAIN_FIELDS = ("seed", "loss")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_PARTIAL = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class ProvenanceError(RuntimeError):
    """Files inside one bundle disagree on their config hash."""


# ----------------------------------------------------------------------------
# scenario configuration

def _pair(value, what: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a pair of intensities, got {value!r}") from None
    try:
        sg.DistributionSpec(a, b)
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    return a, b


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    train_spec: tuple[int, int]
    test_specs: tuple[tuple[int, int], ...]
    losses: tuple[str, ...] = ("ce", "contrastive")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_checkpoint: str = "final"  # "final" | "best"
    pca_fit: str = "train"  # "train" | "all"
    n_saliency: int = 4
    noise_sigma: float = sg.NOISE_SIGMA

    def __post_init__(self):
        if not self.name or not str(self.name).replace("-", "").replace("_", "").isalnum():
            raise ConfigError(f"scenario name must be a simple identifier, got {self.name!r}")
        object.__setattr__(self, "train_spec", _pair(self.train_spec, "train_spec"))
        tests = tuple(_pair(t, "test_specs entry") for t in self.test_specs)
        if not tests:
            raise ConfigError("at least one test distribution is required")
        object.__setattr__(self, "test_specs", tests)
        try:
            losses = tuple(LossKind(x).value for x in self.losses)
        except ValueError:
            raise ConfigError(f"unknown loss in {self.losses!r}") from None
        if not losses or len(set(losses)) != len(losses):
            raise ConfigError("losses must be a non-empty list without repeats")
        object.__setattr__(self, "losses", losses)
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds) or min(seeds) < 0:
            raise ConfigError("seeds must be distinct non-negative integers")
        object.__setattr__(self, "seeds", seeds)
        if self.eval_checkpoint not in ("final", "best"):
            raise ConfigError("eval_checkpoint must be 'final' or 'best'")
        if self.pca_fit not in ("train", "all"):
            raise ConfigError("pca_fit must be 'train' or 'all'")
        if self.n_saliency < 0 or self.noise_sigma < 0:
            raise ConfigError("n_saliency and noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        for k in _PER_RUN_TRAIN_FIELDS:
            train.pop(k)
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "train_spec": list(self.train_spec),
            "test_specs": [list(t) for t in self.test_specs],
            "losses": list(self.losses),
            "seeds": list(self.seeds),
            "train": train,
            "eval_checkpoint": self.eval_checkpoint,
            "pca_fit": self.pca_fit,
            "n_saliency": self.n_saliency,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        if not isinstance(raw, dict):
            raise ConfigError("scenario config must be a JSON object")
        raw = dict(raw)
        version = raw.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        train_raw = dict(raw.pop("train", {}) or {})
        train_known = {f.name for f in fields(TrainConfig)} - set(_PER_RUN_TRAIN_FIELDS)
        bad = set(train_raw) - train_known
        if bad:
            raise ConfigError(f"unknown or per-run train keys: {sorted(bad)}")
        try:
            train = TrainConfig(**train_raw)
            return cls(train=train, **raw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seeds(self, k: int) -> "ScenarioConfig":
        if k < 1:
            raise ConfigError("--seeds must be at least 1")
        return replace(self, seeds=tuple(range(k)))

    def spec(self, pair: tuple[int, int]) -> sg.DistributionSpec:
        return sg.DistributionSpec(*pair, noise_sigma=self.noise_sigma)

    def train_config(self, loss: str, seed: int) -> TrainConfig:
        return replace(self.train, loss=LossKind(loss), seed=seed)


def scenario2_train_spec() -> tuple[int, int]:
    """Grid pair giving both classes the same whole-image mean."""
    mal, ben, _ = sg.equalizing_pair(sg.AREA_MALIGNANT, sg.AREA_BENIGN, sg.BACKGROUND, EQUAL_GLOBAL_MEAN)
    if (mal, ben) != (180, 160):
        raise RuntimeError(f"calibration drifted: equalizing pair is {(mal, ben)}, expected (180, 160)")
    return mal, ben


def default_scenario(number: int) -> ScenarioConfig:
    if number == 1:
        return ScenarioConfig("scenario1", (150, 150), ((130, 170), (170, 130)))
    if number == 2:
        return ScenarioConfig("scenario2", scenario2_train_spec(), ((150, 190), (190, 150)))
    if number == 3:
        return ScenarioConfig("scenario3", (180, 150), ((150, 190),), losses=("ce",))
    raise ConfigError(f"no default scenario {number}")


def load_scenario(arg: str) -> ScenarioConfig:
    if arg in ("1", "2", "3"):
        return default_scenario(int(arg))
    path = Path(arg)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such scenario config: {arg}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{arg}: invalid JSON ({exc})") from None
    return ScenarioConfig.from_dict(raw)


# ----------------------------------------------------------------------------
# identifiers

def data_seed(seed: int, role: str, spec: sg.DistributionSpec) -> int:
    """Dataset seed as a function of (run seed, role, distribution)."""
    ss = np.random.SeedSequence([int(seed), _ROLE_CODE[role], int(spec.i_mal), int(spec.i_ben)])
    return int(ss.generate_state(1)[0])


def train_id(pair) -> str:
    return f"tr({pair[0]},{pair[1]})"


def test_id(pair) -> str:
    return f"te({pair[0]},{pair[1]})"


def spec_label(pair) -> str:
    return f"({pair[0]},{pair[1]})"


def run_payload(cfg: ScenarioConfig, loss: str, seed: int) -> dict:
    tcfg = cfg.train_config(loss, seed)
    tr = cfg.spec(cfg.train_spec)
    return {
        "train": tcfg.to_dict(),
        "train_spec": asdict(tr),
        "test_specs": [asdict(cfg.spec(t)) for t in cfg.test_specs],
        "data_seeds": [data_seed(seed, "train", tr)] + [data_seed(seed, "test", cfg.spec(t)) for t in cfg.test_specs],
        "geometry": asdict(sg.GeometryConfig()),
        "transform": asdict(sg.TransformConfig()),
        "eval_checkpoint": cfg.eval_checkpoint,
        "pca_fit": cfg.pca_fit,
        "n_saliency": cfg.n_saliency,
    }


def run_id(cfg: ScenarioConfig, loss: str, seed: int) -> str:
    return config_hash(run_payload(cfg, loss, seed))


# ----------------------------------------------------------------------------
# results

@dataclass
class RunResult:
    run_id: str
    loss: str
    seed: int
    best_epoch: int
    metrics: dict[str, MetricsReport]  # keyed by dataset id
    projection: FeatureProjection
    saliency: dict[str, list[tuple[np.ndarray, SaliencyMap]]]


@dataclass
class ReportRow:
    d_tr: str
    d_te: str
    loss: str
    n: int
    acc: float
    se: float
    sp: float
    acc_sd: float
    se_sd: float
    sp_sd: float

    @property
    def missing(self) -> bool:
        return self.n == 0


@dataclass
class ReportBundle:
    config: ScenarioConfig
    config_hash: str
    directory: Path
    code_version: str
    runs: list[RunResult]
    failures: list[dict] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.config.seeds

    def run(self, loss: str, seed: int) -> RunResult:
        for r in self.runs:
            if r.loss == loss and r.seed == seed:
                return r
        raise KeyError((loss, seed))

    def dataset_ids(self) -> list[str]:
        return [train_id(self.config.train_spec)] + [test_id(t) for t in self.config.test_specs]

    def aggregate(self) -> list[ReportRow]:
        """Mean and sample standard deviation over seeds, one row per table cell."""
        rows = []
        d_tr = spec_label(self.config.train_spec)
        for loss in self.config.losses:
            for did in self.dataset_ids():
                d_te = "train" if did.startswith("tr") else did[2:]
                reps = [r.metrics[did] for r in self.runs if r.loss == loss and did in r.metrics]
                vals = np.array([[m.acc, m.se, m.sp] for m in reps], dtype=np.float64).reshape(-1, 3)
                n = len(reps)
                mean = vals.mean(axis=0) if n else np.full(3, np.nan)
                sd = vals.std(axis=0, ddof=1) if n > 1 else np.zeros(3) if n else np.full(3, np.nan)
                rows.append(ReportRow(d_tr, d_te, LOSS_LABELS[loss], n, *map(float, mean), *map(float, sd)))
        return rows

    def cell(self, loss: str, test_pair) -> ReportRow:
        for row in self.aggregate():
            if row.loss == LOSS_LABELS[loss] and row.d_te == spec_label(test_pair):
                return row
        raise KeyError((loss, test_pair))


# ----------------------------------------------------------------------------
# one (loss, seed) sub-run

def _evaluate_pair(enc, head, ds: sg.Dataset, did: str, rid: str) -> MetricsReport:
    return confusion_metrics(predict_proba(enc, head, ds.images), ds.labels, dataset_id=did, model_id=rid)


def _execute(cfg: ScenarioConfig, loss: str, seed: int, run_dir: Path, scenario_hash: str) -> None:
    rid = run_dir.name.removeprefix("run-")
    tcfg = cfg.train_config(loss, seed)
    tr_spec = cfg.spec(cfg.train_spec)
    pool = sg.generate_dataset(tr_spec, tcfg.n_train_pool, data_seed(seed, "train", tr_spec), sg.Role.TRAIN)
    train, val = split(pool, tcfg.split, seed)
    sets = {train_id(cfg.train_spec): train}
    for pair in cfg.test_specs:
        spec = cfg.spec(pair)
        sets[test_id(pair)] = sg.generate_dataset(spec, tcfg.n_test, data_seed(seed, "test", spec), sg.Role.TEST)

    model = train_pipeline(train, val, tcfg)
    if cfg.eval_checkpoint == "final":
        enc, head = model.final_encoder, model.final_head
    else:
        enc, head = model.encoder, model.head

    save_model(model, run_dir, {"scenario_hash": scenario_hash, "run_id": rid, "eval_checkpoint": cfg.eval_checkpoint})
    metrics = {did: _evaluate_pair(enc, head, ds, did, rid) for did, ds in sets.items()}

    feats = {did: extract_features(enc, ds.images) for did, ds in sets.items()}
    labels = {did: ds.labels for did, ds in sets.items()}
    fit_on = [train_id(cfg.train_spec)] if cfg.pca_fit == "train" else list(sets)
    proj = project_groups(feats, labels, fit_on)
    _write_projection(run_dir, proj, scenario_hash, rid)

    scorer = model_scorer(enc, head)
    sal_dir = run_dir / "saliency"
    sal_dir.mkdir(exist_ok=True)
    index = []
    for k, (did, ds) in enumerate(sets.items()):
        for i, smp in enumerate(ds.samples[: cfg.n_saliency]):
            sid = f"{did}#{i}"
            smap = saliency(scorer, smp.pixels, sample_id=sid, model_id=rid)
            stem = f"{k}-{i:02d}"
            sg.write_pgm(sal_dir / f"{stem}-image.pgm", smp.pixels, f"config_hash={scenario_hash}")
            sg.write_pgm(sal_dir / f"{stem}-map.pgm", smap.values, f"config_hash={scenario_hash}")
            index.append({"sample_id": sid, "dataset_id": did, "label": int(smp.label),
                          "image": f"{stem}-image.pgm", "map": f"{stem}-map.pgm",
                          "raw_max": smap.raw_max, "is_zero": smap.is_zero})
    _dump_json(sal_dir / "index.json", {"config_hash": scenario_hash, "run_id": rid, "maps": index})

    # written last: marks the sub-run as complete
    _dump_json(run_dir / "result.json", {
        "config_hash": scenario_hash, "run_id": rid, "loss": loss, "seed": seed,
        "best_epoch": model.best_epoch, "eval_checkpoint": cfg.eval_checkpoint,
        "metrics": {did: asdict(m) for did, m in metrics.items()},
    })


def _execute_safe(args) -> tuple[str, int, str | None]:
    cfg, loss, seed, run_dir, scenario_hash = args
    try:
        if (run_dir / "result.json").exists():
            log.info("reusing %s", run_dir.name)
        else:
            log.info("training %s seed %d -> %s", loss, seed, run_dir.name)
            _execute(cfg, loss, seed, run_dir, scenario_hash)
        return loss, seed, None
    except Exception as exc:  # noqa: BLE001 - any sub-run failure makes the bundle partial
        log.error("sub-run %s seed %d failed: %s", loss, seed, exc)
        return loss, seed, f"{type(exc).__name__}: {exc}"


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_projection(run_dir: Path, proj: FeatureProjection, scenario_hash: str, rid: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "dataset_id", "class", "pc1", "pc2", "config_hash"])
    for sid, did, cls, (x, y) in zip(proj.sample_ids, proj.dataset_ids, proj.labels, proj.points):
        w.writerow([sid, did, int(cls), repr(float(x)), repr(float(y)), scenario_hash])
    (run_dir / "pca.csv").write_text(buf.getvalue())
    fit = proj.fit
    _dump_json(run_dir / "pca-fit.json", {
        "config_hash": scenario_hash, "run_id": rid, "mean": fit.mean.tolist(), "basis": fit.basis.tolist(),
        "explained_variance": fit.explained_variance.tolist(), "total_variance": fit.total_variance})
    _dump_json(run_dir / "ellipses.json", {
        "config_hash": scenario_hash, "run_id": rid,
        "ellipses": [{"dataset_id": did, "class": cls, **e.to_dict()} for (did, cls), e in proj.ellipses.items()]})


# ----------------------------------------------------------------------------
# bundle persistence

METRIC_COLUMNS = ["run_id", "seed", "D_tr", "D_te", "loss", "acc", "se", "sp", "tp", "tn", "fp", "fn", "config_hash"]


def bundle_dir(cfg: ScenarioConfig, out) -> Path:
    return Path(out) / f"{cfg.name}-{cfg.hash}"


def run_scenario(cfg: ScenarioConfig, out, workers: int = 1) -> ReportBundle:
    """Train and evaluate every (loss, seed) pair; finished sub-runs are reused."""
    root = bundle_dir(cfg, out)
    root.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    _dump_json(root / "scenario.json", {"config": cfg.to_dict(), "config_hash": h, "code_version": __version__})
    jobs = [(cfg, loss, seed, root / "runs" / f"run-{run_id(cfg, loss, seed)}", h)
            for loss in cfg.losses for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute_safe, jobs))
    else:
        outcomes = [_execute_safe(j) for j in jobs]

    entries = []
    for (_, loss, seed, run_dir, _), (_, _, err) in zip(jobs, outcomes):
        entries.append({"loss": loss, "seed": seed, "run_id": run_dir.name.removeprefix("run-"),
                        "status": "failed" if err else "ok", "error": err})
    _dump_json(root / "bundle.json", {"config_hash": h, "code_version": __version__,
                                      "seeds": list(cfg.seeds), "runs": entries,
                                      "partial": any(e["error"] for e in entries)})
    bundle = load_bundle(root)
    _write_metrics_csv(bundle)
    return bundle


def _write_metrics_csv(bundle: ReportBundle) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    d_tr = spec_label(bundle.config.train_spec)
    for r in bundle.runs:
        for did in bundle.dataset_ids():
            m = r.metrics[did]
            d_te = "train" if did.startswith("tr") else did[2:]
            w.writerow([r.run_id, r.seed, d_tr, d_te, LOSS_LABELS[r.loss], repr(m.acc), repr(m.se), repr(m.sp),
                        m.tp, m.tn, m.fp, m.fn, bundle.config_hash])
    path = bundle.directory / "metrics.csv"
    path.write_text(buf.getvalue())
    return path


def _check_hash(found, expected: str, where) -> None:
    if found != expected:
        raise ProvenanceError(f"{where}: config hash {found!r} does not match bundle hash {expected!r}")


def _load_run(run_dir: Path, expected: str) -> RunResult:
    res = json.loads((run_dir / "result.json").read_text())
    _check_hash(res.get("config_hash"), expected, run_dir / "result.json")
    rid = res["run_id"]
    metrics = {did: MetricsReport(**m) for did, m in res["metrics"].items()}

    with open(run_dir / "pca.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        _check_hash(row["config_hash"], expected, run_dir / "pca.csv")
    fit_raw = json.loads((run_dir / "pca-fit.json").read_text())
    ell_raw = json.loads((run_dir / "ellipses.json").read_text())
    for name, blob in (("pca-fit.json", fit_raw), ("ellipses.json", ell_raw)):
        _check_hash(blob.get("config_hash"), expected, run_dir / name)
    fit = PCAFit(np.array(fit_raw["mean"]), np.array(fit_raw["basis"]),
                 np.array(fit_raw["explained_variance"]), fit_raw["total_variance"])
    ellipses = {(e["dataset_id"], e["class"]): Ellipse(tuple(e["center"]), tuple(e["semi_axes"]), e["angle_deg"])
                for e in ell_raw["ellipses"]}
    proj = FeatureProjection(fit, np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows]).reshape(-1, 2),
                             [r["dataset_id"] for r in rows], np.array([int(r["class"]) for r in rows]),
                             [r["sample_id"] for r in rows], ellipses)

    sal_dir = run_dir / "saliency"
    index = json.loads((sal_dir / "index.json").read_text())
    _check_hash(index.get("config_hash"), expected, sal_dir / "index.json")
    sal: dict[str, list[tuple[np.ndarray, SaliencyMap]]] = {}
    for item in index["maps"]:
        img, img_notes = sg.read_pgm(sal_dir / item["image"])
        values, map_notes = sg.read_pgm(sal_dir / item["map"])
        for note in img_notes + map_notes:
            _check_hash(note.removeprefix("config_hash="), expected, sal_dir / item["map"])
        smap = SaliencyMap(values, item["raw_max"], item["is_zero"], item["sample_id"], rid)
        sal.setdefault(item["dataset_id"], []).append((img, smap))
    return RunResult(rid, res["loss"], res["seed"], res["best_epoch"], metrics, proj, sal)


def load_bundle(directory) -> ReportBundle:
    root = Path(directory)
    try:
        head = json.loads((root / "scenario.json").read_text())
        state = json.loads((root / "bundle.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{root} is not a scenario bundle ({exc.filename} missing)") from None
    cfg = ScenarioConfig.from_dict(head["config"])
    h = head["config_hash"]
    _check_hash(cfg.hash, h, root / "scenario.json")
    _check_hash(state.get("config_hash"), h, root / "bundle.json")
    runs, failures = [], []
    for entry in state["runs"]:
        if entry["status"] != "ok":
            failures.append(entry)
            continue
        runs.append(_load_run(root / "runs" / f"run-{entry['run_id']}", h))
    metrics_csv = root / "metrics.csv"
    if metrics_csv.exists():
        with open(metrics_csv, newline="") as fh:
            for row in csv.DictReader(fh):
                _check_hash(row["config_hash"], h, metrics_csv)
    return ReportBundle(cfg, h, root, head.get("code_version", ""), runs, failures)


# ----------------------------------------------------------------------------
# report table

REPORT_COLUMNS = ["D_tr", "D_te", "Loss", "Acc", "SE", "SP", "Acc_sd", "SE_sd", "SP_sd", "n_seeds", "config_hash"]


def _cell(mean: float, sd: float, n: int) -> str:
    if n == 0:
        return "missing"
    return f"{mean:.2f}" if n == 1 else f"{mean:.2f} ± {sd:.2f}"


def emit_report(bundle: ReportBundle) -> tuple[str, str]:
    """Table-style text and CSV; cells without any finished seed are marked missing."""
    rows = bundle.aggregate()
    header = ["D_tr", "D_te", "Loss", "Acc", "SE", "SP"]
    body = [[r.d_tr, r.d_te, r.loss, _cell(r.acc, r.acc_sd, r.n), _cell(r.se, r.se_sd, r.n),
             _cell(r.sp, r.sp_sd, r.n)] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = [f"{bundle.config.name}  config_hash={bundle.config_hash}  seeds={list(bundle.seeds)}"]
    lines += ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [header, *body]]
    if bundle.partial:
        lines.append(f"partial bundle: {len(bundle.failures)} sub-run(s) failed")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.d_tr, r.d_te, r.loss, repr(r.acc), repr(r.se), repr(r.sp),
                    repr(r.acc_sd), repr(r.se_sd), repr(r.sp_sd), r.n, bundle.config_hash])
    return text, buf.getvalue()


def parse_report_csv(text: str) -> list[ReportRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(ReportRow(rec["D_tr"], rec["D_te"], rec["Loss"], int(rec["n_seeds"]),
                              float(rec["Acc"]), float(rec["SE"]), float(rec["SP"]),
                              float(rec["Acc_sd"]), float(rec["SE_sd"]), float(rec["SP_sd"])))
    return rows


# ----------------------------------------------------------------------------
# figures

def emit_figures(bundle: ReportBundle, out=None) -> list[Path]:
    """A PCA scatter and a saliency grid for every trained model."""
    target = Path(out) if out is not None else bundle.directory / "figures"
    written = []
    tr = train_id(bundle.config.train_spec)
    for r in bundle.runs:
        stem = f"{r.loss}-seed{r.seed}"
        title = f"{bundle.config.name} {LOSS_LABELS[r.loss]} seed {r.seed}"
        svg = pca_scatter_svg(r.projection, tr, f"{title}: embedding PCA", bundle.config_hash)
        written.append(write_text(target / f"pca-{stem}.svg", svg))
        rows = []
        for did in bundle.dataset_ids():
            items = r.saliency.get(did, [])
            rows.append((did, [img for img, _ in items], [m.values for _, m in items]))
        svg = saliency_grid_svg(rows, f"{title}: saliency", bundle.config_hash)
        written.append(write_text(target / f"saliency-{stem}.svg", svg))
    return written


# ----------------------------------------------------------------------------
# command line

def _cmd_generate(args) -> int:
    try:
        pair = _pair(args.spec.split(","), "--spec")
        spec = sg.DistributionSpec(*pair, noise_sigma=args.noise)
        ds = sg.generate_dataset(spec, args.n, args.seed, args.role)
    except (ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = sg.export_dataset(ds, args.out, pgm=args.pgm)
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        cfg = load_scenario(args.scenario)
        if args.seeds is not None:
            cfg = cfg.with_seeds(args.seeds)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        bundle = run_scenario(cfg, args.out, workers=args.workers)
    except Exception as exc:  # noqa: BLE001
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    text, csv_text = emit_report(bundle)
    (bundle.directory / "report.txt").write_text(text)
    (bundle.directory / "report.csv").write_text(csv_text)
    print(text, end="")
    print(f"bundle: {bundle.directory}")
    if not bundle.runs:
        return EXIT_FAILURE
    return EXIT_PARTIAL if bundle.partial else EXIT_OK


def _open_bundle(path):
    try:
        return load_bundle(path), None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None, EXIT_CONFIG
    except (ProvenanceError, OSError, KeyError, ValueError) as exc:
        print(f"cannot load bundle: {exc}", file=sys.stderr)
        return None, EXIT_FAILURE


def _cmd_report(args) -> int:
    bundle, code = _open_bundle(args.dir)
    if bundle is None:
        return code
    text, csv_text = emit_report(bundle)
    (bundle.directory / "report.txt").write_text(text)
    (bundle.directory / "report.csv").write_text(csv_text)
    print(text, end="")
    return EXIT_PARTIAL if bundle.partial else EXIT_OK


def _cmd_figures(args) -> int:
    bundle, code = _open_bundle(args.dir)
    if bundle is None:
        return code
    for path in emit_figures(bundle):
        print(path)
    return EXIT_PARTIAL if bundle.partial else EXIT_OK


def _cmd_calibrate(args) -> int:
    geo, tcfg = sg.GeometryConfig(), sg.TransformConfig()
    print(f"background: {sg.BACKGROUND}")
    print(f"area fractions (target): benign {sg.AREA_BENIGN:.4f}  malignant {sg.AREA_MALIGNANT:.4f}")
    if args.measure:
        ben = sg.mean_mask_fraction(sg.ShapeClass.BENIGN, args.measure, 0, geo, tcfg)
        mal = sg.mean_mask_fraction(sg.ShapeClass.MALIGNANT, args.measure, 0, geo, tcfg)
        print(f"area fractions (measured, n={args.measure}): benign {ben:.4f}  malignant {mal:.4f}")
    for pair in ((150, 150), (180, 160)):
        g = [a * i + (1 - a) * sg.BACKGROUND for a, i in ((sg.AREA_MALIGNANT, pair[0]), (sg.AREA_BENIGN, pair[1]))]
        print(f"expected global means D{spec_label(pair)}: malignant {g[0]:.2f}  benign {g[1]:.2f}")
    print("equalizing pairs (target global mean -> snapped (i_mal, i_ben), exact):")
    for target in range(110, 131, 1):
        try:
            mal, ben, exact = sg.equalizing_pair(sg.AREA_MALIGNANT, sg.AREA_BENIGN, sg.BACKGROUND, float(target))
        except ValueError:
            continue
        print(f"  {target:5.1f} -> ({mal},{ben})  exact ({exact[0]:.2f}, {exact[1]:.2f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oodlab", description="Synthetic shape/intensity shift experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate and export one dataset")
    g.add_argument("--spec", required=True, help="i_mal,i_ben")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--role", default="train", choices=[r.value for r in sg.Role])
    g.add_argument("--noise", type=float, default=sg.NOISE_SIGMA)
    g.add_argument("--pgm", action="store_true", help="also write one PGM per sample")
    g.set_defaults(func=_cmd_generate)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("--scenario", required=True, help="1, 2, 3 or a JSON config path")
    r.add_argument("--seeds", type=int, default=None, help="use seeds 0..K-1")
    r.add_argument("--out", default="runs")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=_cmd_run)

    for name, func, text in (("report", _cmd_report, "print the metrics table"),
                             ("figures", _cmd_figures, "write SVG figures")):
        s = sub.add_parser(name, help=text)
        s.add_argument("dir")
        s.set_defaults(func=func)

    c = sub.add_parser("calibrate", help="print calibration constants")
    c.add_argument("--measure", type=int, default=0, help="also measure mask fractions over N samples")
    c.set_defaults(func=_cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
