"""Command-line interface: ``scorecomp <command> ...`` or ``python -m scorecomp``.

Commands
    train CONFIG           fit a model from a key=value config file
    reconstruct            decomposition-recipe samples for encoded data
    components             one panel per latent component
    manipulate             dilution sweeps over alpha (one or two components)
    tune                   per-component weight grids
    elbo                   per-datum variational bound report
    oracle-check           closed-form self-checks
    replay MANIFEST        regenerate a panel and compare it bit for bit

Component indices are 1-based on the command line. Every sample panel is
written together with a JSON manifest from which :func:`replay` rebuilds it;
nothing is written until all computation for the command has succeeded.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import container, oracle
from .compose import (
    CompositeScore,
    as_score_fn,
    decomposition_recipe,
    dilute_pair,
    dilute_single,
    single_component,
    tune_weights,
)
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    IntegrityError,
    NumericError,
    ShapeMismatchError,
)
from .likelihood import dataset_elbo, model_elbo
from .network import NetConfig
from .sde import DiffusionSchedule, reverse_sample
from .targets import Dataset, load_dataset, to_pixels
from .trainer import TrainConfig, checkpoint_bytes, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4, 5
DEFAULT_ALPHAS = (1.0, 0.7, 0.5, 0.3, 0.1)
RUN_KEYS = {"data": str, "data_format": str, "out": str}


# ---------------------------------------------------------------- config files

def _field_types(cls, prefix=""):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in ("net", "schedule"):
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[prefix + f.name] = type(default)
    return out


def config_keys() -> dict[str, type]:
    keys = dict(RUN_KEYS)
    keys.update(_field_types(TrainConfig))
    keys.update(_field_types(NetConfig, "net."))
    keys.update(_field_types(DiffusionSchedule, "schedule."))
    return keys


def _convert(kind, raw: str):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Unknown or repeated keys and unparsable values raise :class:`ConfigError`
    naming the file and line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    keys = config_keys()
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in entries:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            entries[key] = _convert(keys[key], raw)
        except ValueError:
            raise ConfigError(f"{where}: {key} expects {keys[key].__name__}, got {raw!r}") from None
    return entries


def build_train_config(entries: dict) -> TrainConfig:
    top = {k: v for k, v in entries.items() if "." not in k and k not in RUN_KEYS}
    net = NetConfig(**{k[4:]: v for k, v in entries.items() if k.startswith("net.")})
    try:
        sched = DiffusionSchedule(**{k[9:]: v for k, v in entries.items() if k.startswith("schedule.")})
    except DomainError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    return TrainConfig(net=net, schedule=sched, **top)


# ---------------------------------------------------------------- hashing, io

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def config_hash(cfg: TrainConfig) -> str:
    return sha256_bytes(canonical_json(cfg.to_dict()))


def samples_csv(x: np.ndarray) -> bytes:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(x, dtype=np.float64), fmt="%.17g", delimiter=",")
    return buf.getvalue().encode()


def read_samples_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def histogram_csv(x: np.ndarray, bins: int = 32) -> bytes:
    lo = np.floor(x[:, :2].min(0)) - 1
    hi = np.ceil(x[:, :2].max(0)) + 1
    counts, ex, ey = np.histogram2d(x[:, 0], x[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    buf = io.StringIO()
    buf.write(f"# x edges {ex[0]:g}..{ex[-1]:g}, y edges {ey[0]:g}..{ey[-1]:g}, {bins} bins each\n")
    np.savetxt(buf, counts.astype(int), fmt="%d", delimiter=",")
    return buf.getvalue().encode()


def pgm_grid(x: np.ndarray, shape: tuple[int, int], cols: int = 4) -> bytes:
    h, w = shape
    n = len(x)
    rows = -(-n // cols)
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i, img in enumerate(to_pixels(x).reshape(n, h, w)):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return f"P5\n{cols * w} {rows * h}\n255\n".encode() + canvas.tobytes()


class Outputs:
    """Staged files, flushed atomically once a command has finished computing."""

    def __init__(self, root):
        self.root = Path(root)
        self.files: dict[Path, bytes] = {}

    def add(self, name: str, data: bytes) -> Path:
        path = self.root / name
        self.files[path] = data
        return path

    def flush(self) -> list[Path]:
        self.root.mkdir(parents=True, exist_ok=True)
        for path, data in self.files.items():
            container.atomic_write(path, data)
        return list(self.files)


# ---------------------------------------------------------------- training

def cmd_train(config_path) -> list[Path]:
    entries = parse_config(config_path)
    cfg = build_train_config(entries)
    base = Path(config_path).parent
    if "data" not in entries:
        raise ConfigError(f"{config_path}: missing required key 'data'")
    data_path = base / entries["data"]
    out_dir = base / entries.get("out", "run")
    dataset = load_dataset(data_path, entries.get("data_format"))
    if dataset.dim != cfg.net.d:
        raise ShapeMismatchError(f"{data_path}: data dimension {dataset.dim} but net.d = {cfg.net.d}")
    history = []
    ckpt = train(dataset, cfg, history=history, checkpoint_path=out_dir / "checkpoint.last_good.scmp")

    out = Outputs(out_dir)
    ckpt_bytes = checkpoint_bytes(ckpt)
    out.add("checkpoint.scmp", ckpt_bytes)
    log = io.StringIO()
    writer = csv.writer(log, lineterminator="\n")
    writer.writerow(["iteration", "loss", "wallclock_s"])
    for rec in history:
        writer.writerow([rec.iteration, repr(rec.loss), f"{rec.wallclock_s:.3f}"])
    out.add("loss.csv", log.getvalue().encode())
    manifest = {
        "command": "train",
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "data": {"path": str(data_path), "sha256": sha256_file(data_path) if data_path.is_file() else None,
                 "n": len(dataset)},
        "checkpoint": {"file": "checkpoint.scmp", "sha256": sha256_bytes(ckpt_bytes)},
        "loss_log": "loss.csv",
    }
    out.add("manifest.json", json.dumps(manifest, indent=2).encode())
    return out.flush()



# ---------------------------------------------------------------- sampling panels

@dataclasses.dataclass(frozen=True)
class SamplerSettings:
    n_steps: int = 500
    n_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.n_samples < 1:
            raise ConfigError("n_steps and n_samples must be >= 1")


def unconditional_recipe(d_z: int) -> CompositeScore:
    return CompositeScore((), np.empty((0, d_z)), 1.0, protocol="unconditional")


def panel_rng(seed: int, stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))


def sample_recipe(net, recipe: CompositeScore, settings: SamplerSettings, stream) -> np.ndarray:
    return reverse_sample(net.schedule, as_score_fn(recipe, net.score), settings.n_steps,
                          settings.n_samples, net.config.d, panel_rng(settings.seed, stream))


class Session:
    """A loaded checkpoint plus dataset, shared by the sampling commands."""

    def __init__(self, ckpt_path, data_path, data_format=None, indices=(0,)):
        self.ckpt_path = Path(ckpt_path)
        self.ckpt = load_checkpoint(self.ckpt_path)
        self.ckpt_sha = sha256_file(self.ckpt_path)
        self.net = self.ckpt.model()
        self.data_path = Path(data_path)
        self.dataset = load_dataset(self.data_path, data_format)
        if self.dataset.dim != self.net.config.d:
            raise ShapeMismatchError(
                f"{self.data_path}: data dimension {self.dataset.dim} but checkpoint expects {self.net.config.d}"
            )
        for i in indices:
            if not 0 <= i < len(self.dataset):
                raise DataError(f"{self.data_path}: index {i} outside 0..{len(self.dataset) - 1}")
        self.indices = list(indices)

    def point(self, index: int) -> np.ndarray:
        return self.dataset.points[index].astype(np.float64)

    def bundle(self, index: int):
        return self.net.encode(self.point(index))

    def panel(self, out: Outputs, name: str, command: str, index: int, recipe: CompositeScore,
              settings: SamplerSettings, stream, histogram=False) -> np.ndarray:
        x = sample_recipe(self.net, recipe, settings, stream)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"panel {name}: non-finite samples")
        csv_bytes = samples_csv(x)
        out.add(f"{name}.csv", csv_bytes)
        extra = {}
        if self.dataset.kind == "image":
            out.add(f"{name}.pgm", pgm_grid(x, self.dataset.image_shape))
            extra["image"] = f"{name}.pgm"
        if histogram and x.shape[1] >= 2:
            out.add(f"{name}_hist.csv", histogram_csv(x))
            extra["histogram"] = f"{name}_hist.csv"
        manifest = {
            "command": command,
            "panel": name,
            "checkpoint": {"path": str(self.ckpt_path.resolve()), "sha256": self.ckpt_sha},
            "config_hash": config_hash(self.ckpt.config),
            "seed": settings.seed,
            "stream_key": list(stream),
            "data": {"path": str(self.data_path.resolve()), "index": index, "point": self.point(index).tolist()},
            "recipe": {**recipe.manifest(), "latents": recipe.latents.tolist()},
            "sampler": {"n_steps": settings.n_steps, "n_samples": settings.n_samples},
            "samples": {"file": f"{name}.csv", "sha256": sha256_bytes(csv_bytes), **extra},
        }
        out.add(f"{name}.json", json.dumps(manifest, indent=2).encode())
        return x


def cmd_reconstruct(session: Session, out_dir, settings: SamplerSettings, baseline=False, histogram=False):
    out = Outputs(out_dir)
    for i in session.indices:
        session.panel(out, f"reconstruct_i{i}", "reconstruct", i, decomposition_recipe(session.bundle(i)),
                      settings, (i, 0), histogram)
        if baseline:
            session.panel(out, f"unconditional_i{i}", "reconstruct", i,
                          unconditional_recipe(session.net.config.d_z), settings, (i, 1), histogram)
    return out.flush()


def cmd_components(session: Session, out_dir, settings: SamplerSettings, scaled=False, histogram=False):
    out = Outputs(out_dir)
    for i in session.indices:
        bundle = session.bundle(i)
        for k in range(bundle.K):
            session.panel(out, f"component{k + 1}_i{i}", "components", i,
                          single_component(bundle, k, scaled=scaled), settings, (i, k), histogram)
    return out.flush()


def cmd_manipulate(session: Session, out_dir, settings: SamplerSettings, ks, alphas=DEFAULT_ALPHAS,
                   histogram=False):
    """Dilution sweep; ``ks`` are 1-based component numbers (one or two)."""
    ks = [int(k) for k in ks]
    if len(ks) not in (1, 2):
        raise ConfigError(f"manipulate takes one or two components, got {ks}")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {a}")
    zero_based = [k - 1 for k in ks]
    tag = "-".join(str(k) for k in ks)
    out = Outputs(out_dir)
    for i in session.indices:
        bundle = session.bundle(i)
        for j, a in enumerate(alphas):
            if len(ks) == 1:
                recipe = dilute_single(bundle, zero_based[0], a)
            else:
                recipe = dilute_pair(bundle, zero_based, a)
            session.panel(out, f"dilute{tag}_a{j}_i{i}", "manipulate", i, recipe, settings, (i, j), histogram)
    return out.flush()


def cmd_tune(session: Session, out_dir, settings: SamplerSettings, grid, histogram=False):
    out = Outputs(out_dir)
    K = session.net.config.K
    for row in grid:
        if len(row) != K:
            raise ConfigError(f"weight grid row {list(row)} has {len(row)} entries, model has K={K}")
    for i in session.indices:
        bundle = session.bundle(i)
        for j, row in enumerate(grid):
            session.panel(out, f"tune_r{j}_i{i}", "tune", i, tune_weights(bundle, row), settings, (i, j),
                          histogram)
    return out.flush()


def cmd_elbo(session: Session, n_mc: int, n_time: int, seed: int, method: str, out_path=None) -> dict:
    rows, estimates = [], []
    for i in session.indices:
        rng = panel_rng(seed, (i,))
        est = model_elbo(session.ckpt, session.point(i), decomposition_recipe(session.bundle(i)),
                         n_mc, n_time, rng, method=method)
        estimates.append(est)
        rows.append({"index": i, **est.report()})
    report = {
        "checkpoint": {"path": str(session.ckpt_path.resolve()), "sha256": session.ckpt_sha},
        "seed": seed,
        "per_datum": rows,
        "dataset_mean": dataset_elbo(estimates),
    }
    if out_path is not None:
        container.atomic_write(out_path, json.dumps(report, indent=2).encode())
    return report


def cmd_oracle_check(seed: int = 0, perturb_fn=None) -> tuple[bool, str]:
    kw = {} if perturb_fn is None else {"perturb_fn": perturb_fn}
    results = oracle.run_suite(seed, **kw)
    return all(ok for _, ok, _ in results), oracle.format_report(results)


# ---------------------------------------------------------------- replay

def replay(manifest_path) -> np.ndarray:
    """Regenerate the samples of a panel from its manifest alone (plus the checkpoint)."""
    m = json.loads(Path(manifest_path).read_text())
    ckpt_path = Path(m["checkpoint"]["path"])
    if sha256_file(ckpt_path) != m["checkpoint"]["sha256"]:
        raise IntegrityError(f"{ckpt_path}: checkpoint hash differs from manifest")
    ckpt = load_checkpoint(ckpt_path)
    if config_hash(ckpt.config) != m["config_hash"]:
        raise IntegrityError(f"{ckpt_path}: config hash differs from manifest")
    net = ckpt.model()
    r = m["recipe"]
    latents = np.asarray(r["latents"], dtype=np.float64).reshape(-1, net.config.d_z)
    if len(latents):
        encoded = net.encode(np.asarray(m["data"]["point"])).latents
        if not np.array_equal(encoded[: len(latents)], latents):
            raise IntegrityError(f"{manifest_path}: stored latents do not match the encoder")
    recipe = CompositeScore(tuple(r["component_weights"]), latents, r["uncond_weight"],
                            protocol=r["protocol"], alpha=r["alpha"])
    settings = SamplerSettings(m["sampler"]["n_steps"], m["sampler"]["n_samples"], m["seed"])
    return sample_recipe(net, recipe, settings, m["stream_key"])


def verify_replay(manifest_path) -> bool:
    m = json.loads(Path(manifest_path).read_text())
    x = replay(manifest_path)
    stored = Path(manifest_path).parent / m["samples"]["file"]
    return sha256_bytes(samples_csv(x)) == m["samples"]["sha256"] == sha256_file(stored)


# ---------------------------------------------------------------- argparse

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> list[list[float]]:
    rows = [_floats(r) for r in text.split(";") if r.strip()]
    if not rows:
        raise ConfigError("empty weight grid")
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorecomp", description="Decomposed score-model toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key=value config file")
    t.add_argument("config")

    def sampling(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--data-format", default=None)
        s.add_argument("--index", default="0", help="comma-separated data indices")
        s.add_argument("--out", required=True)
        s.add_argument("--n-samples", type=int, default=16)
        s.add_argument("--n-steps", type=int, default=500)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--histogram", action="store_true", help="also dump a 2D density histogram")
        return s

    r = sampling("reconstruct", "decomposition-recipe samples")
    r.add_argument("--baseline", action="store_true", help="add an unconditional (ones-latent) panel")
    c = sampling("components", "one panel per component")
    c.add_argument("--scaled", action="store_true", help="weight 1/K instead of 1")
    m = sampling("manipulate", "dilution sweep")
    g = m.add_mutually_exclusive_group(required=True)
    g.add_argument("--k", type=int, help="component to dilute (1-based)")
    g.add_argument("--ks", help="two components to dilute together, e.g. 1,2")
    m.add_argument("--alphas", default=",".join(str(a) for a in DEFAULT_ALPHAS))
    u = sampling("tune", "weight grid sweep")
    u.add_argument("--grid", required=True, help="rows separated by ';', e.g. '1,1,1;2,0,1'")

    e = sub.add_parser("elbo", help="variational bound report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--data-format", default=None)
    e.add_argument("--index", default="0")
    e.add_argument("--n-mc", type=int, default=64)
    e.add_argument("--n-time", type=int, default=16)
    e.add_argument("--method", choices=("exact-fd", "hutchinson"), default="exact-fd")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)

    o = sub.add_parser("oracle-check", help="closed-form self-checks")
    o.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("replay", help="regenerate a panel from its manifest")
    rp.add_argument("manifest")
    return p


def run(args) -> int:
    if args.command == "train":
        for path in cmd_train(args.config):
            print(path)
        return EXIT_OK
    if args.command == "oracle-check":
        ok, report = cmd_oracle_check(args.seed)
        print(report)
        return EXIT_OK if ok else EXIT_ORACLE
    if args.command == "replay":
        if not verify_replay(args.manifest):
            raise IntegrityError(f"{args.manifest}: regenerated samples differ from the stored panel")
        print(f"{args.manifest}: bit-identical")
        return EXIT_OK
    session = Session(args.ckpt, args.data, args.data_format, _ints(args.index))
    if args.command == "elbo":
        report = cmd_elbo(session, args.n_mc, args.n_time, args.seed, args.method, args.out)
        print(json.dumps(report, indent=2))
        return EXIT_OK
    settings = SamplerSettings(args.n_steps, args.n_samples, args.seed)
    common = dict(histogram=args.histogram)
    if args.command == "reconstruct":
        paths = cmd_reconstruct(session, args.out, settings, baseline=args.baseline, **common)
    elif args.command == "components":
        paths = cmd_components(session, args.out, settings, scaled=args.scaled, **common)
    elif args.command == "manipulate":
        ks = [args.k] if args.k is not None else _ints(args.ks)
        paths = cmd_manipulate(session, args.out, settings, ks, _floats(args.alphas), **common)
    else:
        paths = cmd_tune(session, args.out, settings, _grid(args.grid), **common)
    for path in paths:
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, DomainError) as exc:
        code, msg = EXIT_CONFIG, exc
    except (DataError, IntegrityError, ShapeMismatchError) as exc:
        code, msg = EXIT_DATA, exc
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, exc
    print(f"scorecomp {args.command}: error: {msg}", file=sys.stderr)
    return code
