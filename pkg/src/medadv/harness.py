"""
Experiment pipeline: spec parsing, seed derivation and the train / attack /
detect / analyze / report stages.

A spec is an INI file. Every stage reads the spec, regenerates (or loads)
the dataset deterministically and writes under the output directory::

    train/    model.ckpt, surrogate1.ckpt, clean_metrics.csv
    attacks/  <method>/eps_<e>/{advtrain,advtest}/ and accuracy.csv
    detect/   table4.csv, table5.csv, table5_heldout.csv
    analyze/  maps, landscape grids and embeddings
    report/   report.csv, summary.txt
"""

from __future__ import annotations

import configparser
import csv
import os
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import analysis as an
from .attacks import METHODS, AttackConfig, attack_batch, load_adv_batch, save_adv_batch
from .classifier import (TrainConfig, build_model, evaluate, load_checkpoint, predict, reference_recipe,
                         save_checkpoint, train, with_clean_accuracy)
from .data import SPLITS, Dataset, SynthConfig, generate_synthetic, load_images, manifest_splits, read_manifest, split_dataset
from .detectors import DetectorConfig, detect_experiment, read_rows, transfer_experiment, write_rows
from .errors import ConfigError, FormatError
from .features import FAMILIES, KdConfig, LidConfig, build_feature_matrix, family_tag, fit_kd_reference


class MissingArtifact(FileNotFoundError):
    """A stage needs the output of an earlier stage that is not there."""


def derive_seed(seed: int, purpose: str, index: int = 0) -> int:
    """Stable 32-bit substream seed for ``(seed, purpose, index)``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode("utf-8")), int(index)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------

DEFAULTS = {
    "experiment": {"seed": "0", "name": "synthetic", "output": ""},
    "data": {"source": "synthetic", "manifest": "", "count": "2000", "num_classes": "2", "image_size": "32", "channels": "3",
             "lesion_texture": "", "ratios": "0.6, 0.32, 0.08"},
    "model": {"width": "128"},
    "train": {"epochs": "12", "learning_rate": "0.02", "momentum": "0.9", "batch_size": "16", "flip": "true",
              "shift": "2", "surrogates": "1"},
    "attack": {"methods": "fgsm, bim, pgd, cw", "eps": "0.2, 0.5, 1, 2, 5", "detect_eps": "3", "alpha": "",
               "steps": "", "kappa": "0", "random_start": "", "max_samples": "0"},
    "detect": {"families": "kd, lid, dfeat, qfeat", "sources": "fgsm, pgd", "lid_n": "20", "lid_batch": "100",
               "kd_sigma": "", "l2": "1e-4", "iterations": "500", "step": "0.1"},
    "analyze": {"samples": "4", "attack": "pgd", "tap": "relu3", "grid_max": "8", "grid_steps": "9"},
}


@dataclass
class ExperimentSpec:
    values: dict
    path: str = ""
    lines: dict = field(default_factory=dict)
    output: str = ""

    def where(self, section: str, key: str) -> str:
        line = self.lines.get((section, key))
        if line is None:
            return f"[{section}] {key}"
        return f"{self.path}:{line}: [{section}] {key}"

    def raw(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _convert(self, section, key, fn, what):
        text = self.raw(section, key)
        try:
            return fn(text)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.where(section, key)}: expected {what}, got {text!r}") from None

    def int(self, section, key) -> int:
        return self._convert(section, key, int, "an integer")

    def float(self, section, key) -> float:
        return self._convert(section, key, float, "a number")

    def optional_float(self, section, key):
        return None if self.raw(section, key).strip() == "" else self.float(section, key)

    def optional_int(self, section, key):
        return None if self.raw(section, key).strip() == "" else self.int(section, key)

    def bool(self, section, key) -> bool:
        text = self.raw(section, key).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.where(section, key)}: expected true/false, got {text!r}")

    def list(self, section, key) -> list:
        return [t.strip() for t in self.raw(section, key).split(",") if t.strip()]

    def floats(self, section, key) -> list:
        return self._convert(section, key, lambda s: [float(t) for t in s.split(",") if t.strip()], "numbers")

    @property
    def seed(self) -> int:
        return self.int("experiment", "seed")


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            lines[(section, key)] = no
    return lines


def parse_overrides(args) -> dict:
    """``--section.key=value`` (or ``--section.key value``) pairs."""
    out, i = {}, 0
    args = list(args)
    while i < len(args):
        a = args[i]
        m = re.match(r"^--([A-Za-z_]\w*)\.([A-Za-z_]\w*)(?:=(.*))?$", a)
        if not m:
            raise ConfigError(f"unrecognized argument {a!r}; overrides look like --section.key=value")
        value = m.group(3)
        if value is None:
            if i + 1 >= len(args):
                raise ConfigError(f"override {a} needs a value")
            value = args[i + 1]
            i += 1
        out[(m.group(1), m.group(2).lower())] = value
        i += 1
    return out


def load_spec(path=None, overrides=None, text=None) -> ExperimentSpec:
    """Read a spec (file or text), apply defaults and overrides, then validate."""
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    lines = {}
    if path is not None or text is not None:
        if text is None:
            if not os.path.isfile(path):
                raise ConfigError(f"spec file {path} does not exist")
            with open(path, encoding="utf-8") as f:
                text = f.read()
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(text, source=str(path or "<spec>"))
        except configparser.Error as exc:
            raise ConfigError(f"{path or '<spec>'}: {exc}") from None
        lines = _key_lines(text)
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"{path}:{_section_line(text, section)}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in values[section]:
                    spec = ExperimentSpec(values, str(path), lines)
                    raise ConfigError(f"{spec.where(section, key)}: unknown key")
                values[section][key] = value
    for (section, key), value in (overrides or {}).items():
        if section not in values or key not in values[section]:
            raise ConfigError(f"override --{section}.{key}: unknown key")
        values[section][key] = value
        lines.pop((section, key), None)
    spec = ExperimentSpec(values, str(path or "<spec>"), lines)
    validate_spec(spec)
    return spec


def _section_line(text, section):
    for no, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{section}]":
            return no
    return 0


def validate_spec(spec: ExperimentSpec) -> None:
    spec.seed
    source = spec.raw("data", "source").strip().lower()
    if source not in ("synthetic", "manifest"):
        raise ConfigError(f"{spec.where('data', 'source')}: expected 'synthetic' or 'manifest'")
    if source == "manifest":
        path = spec.raw("data", "manifest").strip()
        if not path or not os.path.isfile(path):
            raise ConfigError(f"{spec.where('data', 'manifest')}: dataset manifest {path!r} does not exist")
    else:
        if spec.int("data", "num_classes") not in (2, 3, 4):
            raise ConfigError(f"{spec.where('data', 'num_classes')}: the synthetic generator supports 2 to 4 classes")
        if spec.int("data", "count") < 10:
            raise ConfigError(f"{spec.where('data', 'count')}: need at least 10 samples")
        ratios = spec.floats("data", "ratios")
        if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
            raise ConfigError(f"{spec.where('data', 'ratios')}: three non-negative ratios summing to 1 required")
        spec.optional_float("data", "lesion_texture")
    if spec.int("data", "channels") not in (1, 3):
        raise ConfigError(f"{spec.where('data', 'channels')}: expected 1 or 3")
    for key in ("epochs", "batch_size", "shift", "surrogates"):
        spec.int("train", key)
    spec.float("train", "learning_rate")
    spec.bool("train", "flip")
    for m in spec.list("attack", "methods"):
        if m.lower() not in METHODS:
            raise ConfigError(f"{spec.where('attack', 'methods')}: unknown attack {m!r}")
    eps = spec.floats("attack", "eps")
    if not eps or any(b <= a for a, b in zip(eps, eps[1:])) or eps[0] < 0:
        raise ConfigError(f"{spec.where('attack', 'eps')}: eps values must be non-negative and strictly increasing")
    spec.float("attack", "detect_eps")
    spec.float("attack", "kappa")
    spec.optional_float("attack", "alpha")
    spec.optional_int("attack", "steps")
    if spec.raw("attack", "random_start").strip():
        spec.bool("attack", "random_start")
    for f in spec.list("detect", "families"):
        try:
            family_tag(f)
        except ConfigError:
            raise ConfigError(f"{spec.where('detect', 'families')}: unknown family {f!r}") from None
    for s in spec.list("detect", "sources"):
        if s.lower() not in METHODS:
            raise ConfigError(f"{spec.where('detect', 'sources')}: unknown attack {s!r}")
    n, b = spec.int("detect", "lid_n"), spec.int("detect", "lid_batch")
    if not 2 <= n < b:
        raise ConfigError(f"{spec.where('detect', 'lid_n')}: need 2 <= lid_n < lid_batch")
    spec.optional_float("detect", "kd_sigma")
    spec.int("analyze", "samples")
    if spec.raw("analyze", "attack").strip().lower() not in METHODS:
        raise ConfigError(f"{spec.where('analyze', 'attack')}: unknown attack")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def out_path(out: str, *parts) -> str:
    return os.path.join(out, *parts)


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {what}: {path} (run the earlier stage first)")
    return path


def synth_config(spec: ExperimentSpec) -> SynthConfig:
    kwargs = {}
    lt = spec.optional_float("data", "lesion_texture")
    if lt is not None:
        kwargs["lesion_texture"] = lt
    return SynthConfig(num_classes=spec.int("data", "num_classes"), image_size=spec.int("data", "image_size"),
                       seed=derive_seed(spec.seed, "data"), **kwargs)


def load_data(spec: ExperimentSpec) -> dict:
    """Train / AdvTrain / AdvTest datasets keyed by split name."""
    if spec.raw("data", "source").strip().lower() == "manifest":
        path = spec.raw("data", "manifest").strip()
        size = spec.int("data", "image_size")
        manifest = read_manifest(path, spec.int("data", "num_classes"), (size, size, spec.int("data", "channels")))
        groups = manifest_splits(manifest)
        if None in groups and len(groups) == 1:
            # untagged manifest: split it like a synthetic set
            parts = split_dataset(load_images(manifest), spec.floats("data", "ratios"),
                                  seed=derive_seed(spec.seed, "split"))
            return dict(zip(SPLITS, parts))
        unknown = sorted(str(k) for k in groups if k not in SPLITS)
        if unknown:
            raise FormatError(f"{path}: split tags must be one of {SPLITS}, found {unknown}")
        missing = [k for k in SPLITS if k not in groups]
        if missing:
            raise FormatError(f"{path}: no entries tagged {missing}")
        return {k: load_images(groups[k]) for k in SPLITS}
    data = generate_synthetic(synth_config(spec), spec.int("data", "count"))
    parts = split_dataset(data, spec.floats("data", "ratios"), seed=derive_seed(spec.seed, "split"))
    return dict(zip(SPLITS, parts))


def _cap(ds: Dataset, limit: int) -> Dataset:
    return ds if limit <= 0 or len(ds.labels) <= limit else ds.subset(np.arange(limit))


def train_config(spec: ExperimentSpec, purpose: str) -> TrainConfig:
    return TrainConfig(epochs=spec.int("train", "epochs"), learning_rate=spec.float("train", "learning_rate"),
                       momentum=spec.float("train", "momentum"), batch_size=spec.int("train", "batch_size"),
                       flip=spec.bool("train", "flip"), shift=spec.int("train", "shift"),
                       seed=derive_seed(spec.seed, purpose))


def attack_config(spec: ExperimentSpec, method: str, eps: float) -> AttackConfig:
    rs = spec.raw("attack", "random_start").strip()
    return AttackConfig(method, eps, alpha=spec.optional_float("attack", "alpha"),
                        steps=spec.optional_int("attack", "steps") if method != "fgsm" else None,
                        kappa=spec.float("attack", "kappa"),
                        random_start=spec.bool("attack", "random_start") if rs else None,
                        seed=derive_seed(spec.seed, f"attack:{method}"))


def eps_tag(eps: float) -> str:
    return f"eps_{eps:g}"


def attack_dir(out: str, method: str, eps: float, subset: str) -> str:
    return out_path(out, "attacks", method, eps_tag(eps), subset)


def _write_csv(path, header, rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_train(spec: ExperimentSpec, out: str, log=print) -> dict:
    """Train the target model and the surrogates; write checkpoints and clean metrics."""
    data = load_data(spec)
    tr, test = data["Train"], data["AdvTest"]
    k = tr.num_classes
    shape = tr.images.shape[1:]
    rows, models = [], {}
    _mkdir(out, "train")
    names = ["model"] + [f"surrogate{i}" for i in range(1, spec.int("train", "surrogates") + 1)]
    for name in names:
        cfg = reference_recipe(k, shape, spec.int("model", "width"), seed=derive_seed(spec.seed, f"init:{name}"))
        model = train(build_model(cfg), tr.images, tr.labels, train_config(spec, f"train:{name}"))
        acc, auc = evaluate(model, test.images, test.labels)
        model = with_clean_accuracy(model, acc)
        if not np.isfinite(model.loss_history[-1] if model.loss_history else 0.0):
            raise ArithmeticError(f"{name}: training loss is not finite")
        save_checkpoint(out_path(out, "train", f"{name}.ckpt"), model)
        rows.append([name, _fmt(acc), "n/a" if auc is None else _fmt(auc), len(test.labels)])
        models[name] = model
        log(f"trained {name}: clean accuracy {acc:.4f}")
    _write_csv(out_path(out, "train", "clean_metrics.csv"), ["model", "accuracy", "auc", "samples"], rows)
    return models


def cmd_evaluate(spec: ExperimentSpec, out: str, split: str = "AdvTest", checkpoint=None, log=print) -> tuple:
    """Clean accuracy (and AUC for two classes) of a checkpoint on one split."""
    model = load_checkpoint(_require(checkpoint, "checkpoint")) if checkpoint else _load_model(out)
    data = load_data(spec)
    if split not in data:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    ds = data[split]
    acc, auc = evaluate(model, ds.images, ds.labels)
    log(f"split,accuracy,auc,samples\n{split},{_fmt(acc)},{'n/a' if auc is None else _fmt(auc)},{len(ds)}")
    return acc, auc


def _load_model(out: str, name: str = "model"):
    return load_checkpoint(_require(out_path(out, "train", f"{name}.ckpt"), f"{name} checkpoint"))


def _surrogates(out: str, spec: ExperimentSpec) -> list:
    return [_load_model(out, f"surrogate{i}") for i in range(1, spec.int("train", "surrogates") + 1)]


def cmd_attack(spec: ExperimentSpec, out: str, log=print) -> list:
    """Sweep every attack over eps (plus the detection budget) on AdvTrain and AdvTest."""
    model = _load_model(out)
    data = load_data(spec)
    limit = spec.int("attack", "max_samples")
    subsets = {"advtrain": _cap(data["AdvTrain"], limit), "advtest": _cap(data["AdvTest"], limit)}
    sweep = spec.floats("attack", "eps")
    budgets = sorted(set(sweep) | {spec.float("attack", "detect_eps")})
    rows = []
    for method in [m.lower() for m in spec.list("attack", "methods")]:
        for eps in budgets:
            batches = {}
            for subset, ds in subsets.items():
                b = attack_batch(model, ds.images, ds.labels, attack_config(spec, method, eps), ds.ids)
                save_adv_batch(attack_dir(out, method, eps, subset), b)
                batches[subset] = b
            if eps in sweep:
                tr, te = batches["advtrain"], batches["advtest"]
                both = (np.sum(~tr.success) + np.sum(~te.success)) / (len(tr) + tr.excluded + len(te) + te.excluded)
                rows.append([method, f"{eps:g}", _fmt(te.accuracy()), _fmt(tr.accuracy()), _fmt(both),
                             _fmt(te.success_rate()), len(te), te.excluded])
                log(f"{method} eps={eps:g}/255: AdvTest accuracy {te.accuracy():.4f}")
    _write_csv(out_path(out, "attacks", "accuracy.csv"),
               ["attack", "eps", "accuracy", "accuracy_advtrain", "accuracy_all", "success_rate", "attacked",
                "excluded"], rows)
    return rows


def _load_pair(out: str, method: str, eps: float):
    pair = []
    for subset in ("advtrain", "advtest"):
        d = attack_dir(out, method, eps, subset)
        _require(os.path.join(d, "attack.json"), f"{method} attack output at eps {eps:g}")
        pair.append(load_adv_batch(d))
    return tuple(pair)


def feature_settings(spec: ExperimentSpec, model, data):
    kd_sigma = spec.optional_float("detect", "kd_sigma")
    kd = fit_kd_reference(model, data["Train"].images, data["Train"].labels, KdConfig(sigma=kd_sigma))
    lid = LidConfig(n=spec.int("detect", "lid_n"), batch_size=spec.int("detect", "lid_batch"))
    det = DetectorConfig(l2=spec.float("detect", "l2"), iterations=spec.int("detect", "iterations"),
                         step=spec.float("detect", "step"))
    return kd, lid, det


def cmd_detect(spec: ExperimentSpec, out: str, log=print) -> dict:
    """Detection AUC per (family, attack) and transfer AUC from each source attack."""
    model = _load_model(out)
    data = load_data(spec)
    eps = spec.float("attack", "detect_eps")
    methods = [m.lower() for m in spec.list("attack", "methods")]
    pairs = {m: _load_pair(out, m, eps) for m in methods}
    kd, lid, det = feature_settings(spec, model, data)
    name = spec.raw("experiment", "name").strip()
    table4 = []
    for family in [family_tag(f) for f in spec.list("detect", "families")]:
        for m in methods:
            row = detect_experiment(model, *pairs[m], family, kd=kd, lid=lid, config=det, dataset=name)
            table4.append(row)
            log(f"detect {family} vs {m}: AUC {row.auc if row.auc is None else round(row.auc, 4)}")
    union, held = [], []
    for src in [s.lower() for s in spec.list("detect", "sources")]:
        if src not in pairs:
            raise MissingArtifact(f"transfer source {src} was not attacked (attack.methods)")
        for row in transfer_experiment(model, pairs[src], pairs, "DFeat", kd=kd, lid=lid, config=det, dataset=name):
            (union if row.protocol == "union" else held).append(row)
    _mkdir(out, "detect")
    write_rows(out_path(out, "detect", "table4.csv"), table4)
    write_rows(out_path(out, "detect", "table5.csv"), union)
    write_rows(out_path(out, "detect", "table5_heldout.csv"), held)
    return {"table4": table4, "table5": union, "table5_heldout": held}


def _mkdir(out, *parts) -> bool:
    os.makedirs(out_path(out, *parts), exist_ok=True)
    return True


def cmd_analyze(spec: ExperimentSpec, out: str, log=print) -> dict:
    """Maps, landscapes and embeddings for the first few attacked AdvTest samples."""
    model = _load_model(out)
    surrogates = _surrogates(out, spec)
    eps = spec.float("attack", "detect_eps")
    method = spec.raw("analyze", "attack").strip().lower()
    _, test = _load_pair(out, method, eps)
    tap = spec.raw("analyze", "tap").strip()
    steps = spec.int("analyze", "grid_steps")
    axis = np.linspace(0.0, spec.float("analyze", "grid_max"), steps)
    base = out_path(out, "analyze")
    _mkdir(out, "analyze", "maps")
    _mkdir(out, "analyze", "landscapes")
    summary = []
    chosen = np.nonzero(test.success)[0][: spec.int("analyze", "samples")]
    for i in chosen:
        sid, x, xa, y = test.ids[i], test.originals[i], test.adversarials[i], int(test.labels[i])
        ya = int(predict(model, xa))
        stem = os.path.join(base, "maps", sid)
        an.write_map(stem + "_saliency_clean", an.saliency_map(model, x, y).values)
        an.write_map(stem + "_saliency_adv", an.saliency_map(model, xa, y).values)
        an.write_map(stem + "_gradcam_clean", an.grad_cam(model, x, y, tap).values)
        an.write_map(stem + "_gradcam_adv", an.grad_cam(model, xa, ya, tap).values)
        an.write_map(stem + "_repr_clean", an.representation_map(model, x, tap))
        an.write_map(stem + "_repr_adv", an.representation_map(model, xa, tap))
        g = an.loss_direction(model, x, y)
        g_perp = an.surrogate_direction(surrogates, x, y) if surrogates else g
        grid = an.loss_landscape(model, x, y, g, g_perp, axis, axis)
        clean = an.clean_loss(model, x, y)
        if grid.anchor != clean:
            raise ArithmeticError(f"landscape anchor {grid.anchor!r} differs from clean loss {clean!r} for {sid}")
        an.write_landscape_csv(os.path.join(base, "landscapes", f"{sid}.csv"), grid)
        summary.append([sid, y, ya, repr(clean), repr(grid.anchor), _fmt(grid.sharpness)])
    _write_csv(os.path.join(base, "landscape_summary.csv"),
               ["id", "label", "adv_prediction", "clean_loss", "anchor", "sharpness"], summary)
    _mkdir(out, "analyze", "embeddings")
    for m in [m.lower() for m in spec.list("attack", "methods")]:
        _, t = _load_pair(out, m, eps)
        advs = t.adversarials[t.success]
        if len(advs) == 0 or len(t) + len(advs) < 3:
            continue
        fm = build_feature_matrix(model, t.originals, advs, "DFeat")
        emb = an.embed_2d(fm.rows)
        an.write_embedding_csv(os.path.join(base, "embeddings", f"{m}.csv"), emb.coords, fm.labels)
    log(f"analysis written for {len(chosen)} samples")
    return {"landscapes": summary}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

DEVIATIONS = [
    "Detectors: one logistic-regression backend for every feature family (random forest and SVM are not used).",
    "Embeddings: PCA instead of t-SNE.",
    "Kernel density uses a negative exponent and penultimate-layer features.",
    "Datasets: seeded synthetic lesion images stand in for the medical datasets; small CNN instead of ResNet-50.",
    "Transfer detectors use DFeat; a held-out protocol is reported next to the union protocol.",
]

SECTIONS = [
    ("clean", "train/clean_metrics.csv"),
    ("attack_sweep", "attacks/accuracy.csv"),
    ("detection", "detect/table4.csv"),
    ("transfer", "detect/table5.csv"),
    ("transfer_heldout", "detect/table5_heldout.csv"),
    ("landscape", "analyze/landscape_summary.csv"),
]


def cmd_report(out: str, log=print) -> dict:
    """Consolidate stage CSVs into ``report/``; every value carries a file:row:column pointer."""
    rows, present = [], {}
    lines = ["Experiment report", "=================", ""]
    for section, rel in SECTIONS:
        path = out_path(out, *rel.split("/"))
        if not os.path.isfile(path):
            present[section] = False
            lines += [f"[{section}] MISSING ({rel} not found)", ""]
            continue
        present[section] = True
        table = _read_csv(path)
        header, body = table[0], table[1:]
        lines.append(f"[{section}] from {rel}")
        lines.append("  " + " | ".join(header))
        for r, record in enumerate(body, start=2):
            lines.append("  " + " | ".join(record))
            for c, (col, value) in enumerate(zip(header, record), start=1):
                rows.append([section, r - 1, col, value, f"{rel}:{r}:{c}"])
        lines.append("")
    lines.append("[deviations]")
    lines += [f"  - {d}" for d in DEVIATIONS]
    lines.append("")
    _mkdir(out, "report")
    _write_csv(out_path(out, "report", "report.csv"), ["section", "row", "column", "value", "source"], rows)
    with open(out_path(out, "report", "summary.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines))
    log(f"report written to {out_path(out, 'report')}")
    return present


def run_pipeline(spec: ExperimentSpec, out: str, log=print) -> None:
    cmd_train(spec, out, log)
    cmd_attack(spec, out, log)
    cmd_detect(spec, out, log)
    cmd_analyze(spec, out, log)
    cmd_report(out, log)


def cmd_extract_features(spec: ExperimentSpec, out: str, family: str, adv_dir: str, dest: str, tap=None):
    """Feature matrix (normals vs successful adversarials) of one persisted attack batch."""
    model = _load_model(out)
    batch = load_adv_batch(_require(adv_dir, "attack directory"))
    data = load_data(spec)
    kd, lid, _ = feature_settings(spec, model, data)
    family = family_tag(family)
    if tap:
        if family == "KD":
            kd = fit_kd_reference(model, data["Train"].images, data["Train"].labels, KdConfig(kd.config.sigma, tap))
        elif family == "LID":
            lid = LidConfig(lid.n, lid.batch_size, tuple(t.strip() for t in tap.split(",")))
        else:
            raise ConfigError("--tap applies to the kd and lid families only")
    advs = batch.adversarials[batch.success]
    if len(advs) == 0:
        raise ValueError("attack batch has no successful adversarial examples")
    from .features import save_feature_matrix

    fm = build_feature_matrix(model, batch.originals, advs, family, kd=kd, lid=lid)
    save_feature_matrix(dest, fm)
    return fm


__all__ = [
    "ExperimentSpec", "MissingArtifact", "FormatError", "derive_seed", "load_spec", "parse_overrides",
    "cmd_train", "cmd_evaluate", "cmd_attack", "cmd_detect", "cmd_analyze", "cmd_report", "cmd_extract_features", "run_pipeline",
    "read_rows", "FAMILIES",
]
