"""Stage orchestration: every stage writes its artifact plus a ``.prov.json`` sidecar.

A sidecar records the hash of the config blocks the stage read, the SHA-256
of each upstream artifact, and the SHA-256 of the output. Rerunning a stage
whose sidecar still matches is a no-op; a mismatch raises ProvenanceError
unless ``force`` is set, in which case the stage is recomputed.

Layout under ``out_dir``::

    teacher.ckpt  student_ce.ckpt  student_kd.ckpt          models (+ .csv/.json reports)
    prior.csv  prior_raw.csv                               class-similarity matrices
    di_<size>.tset  di_<size>_uniform.tset  ci_<size>.tset  transfer sets
    zskd_<source>_<size>.ckpt  real_kd_<size>.ckpt          students distilled per size
    finetune_<size>.ckpt  augmented_<size>.tset
    sweep.csv  report.md  report.csv
    state/                                                  resumable training state
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import augment as A
from . import data as D
from . import distill as S
from . import impressions as I
from . import models as M
from . import prior as P
from .config import ExperimentConfig, n_samples, size_key
from .errors import ProvenanceError

log = logging.getLogger(__name__)

SOURCES = ("di", "ci", "di_uniform")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stem(path: Path) -> Path:
    """``path`` without its final extension; size keys such as ``0.5`` contain dots."""
    return path.with_name(path.name.rsplit(".", 1)[0])


def _pct(value):
    """Accuracy rounded to hundredths of a percent for tables (None stays None)."""
    return None if value is None else round(float(value), 2)


def _prov_path(path: Path) -> Path:
    return path.with_name(path.name + ".prov.json")


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "state").mkdir(exist_ok=True)
        self._data = {}

    # ------------------------------------------------------------ plumbing

    def path(self, name: str) -> Path:
        return self.out / name

    def data(self, split: str) -> D.Dataset:
        if split not in self._data:
            exp = self.cfg["experiment"]
            self._data[split] = D.load_split(exp["data_dir"], split, exp["resize"])
        return self._data[split]

    def _provenance(self, stage: str, sections, inputs) -> dict:
        return {"stage": stage, "config_hash": self.cfg.block_hash(*sections),
                "inputs": {p.name: file_hash(p) for p in inputs}}

    def _fresh(self, path: Path, prov: dict) -> bool:
        """True when ``path`` is up to date; raise on a stale artifact unless forcing."""
        side = _prov_path(path)
        if not path.exists() or not side.exists():
            return False
        found = json.loads(side.read_text())
        output = found.pop("output_sha256", None)
        if found == prov and output == file_hash(path):
            log.info("%s is up to date", path.name)
            return True
        if self.force:
            log.info("%s is stale; recomputing (--force)", path.name)
            side.unlink()
            return False
        what = [k for k in ("config_hash", "inputs") if found.get(k) != prov.get(k)] or ["output hash"]
        raise ProvenanceError(f"{path} is stale ({', '.join(what)} changed); rerun with --force to rebuild")

    def _seal(self, path: Path, prov: dict) -> None:
        _prov_path(path).write_text(json.dumps(dict(prov, output_sha256=file_hash(path)), indent=2,
                                               sort_keys=True) + "\n")

    def _require(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run the stage that produces it first")
        side = _prov_path(path)
        if side.exists():
            recorded = json.loads(side.read_text()).get("output_sha256")
            if recorded != file_hash(path) and not self.force:
                raise ProvenanceError(f"{path} no longer matches its provenance record")
        return path

    def _state(self, name: str, prov: dict) -> Path:
        """Resume file for a training stage; discarded when the provenance moved on."""
        state = self.out / "state" / f"{name}.npz"
        tag = self.out / "state" / f"{name}.json"
        if tag.exists() and json.loads(tag.read_text()) != prov:
            state.unlink(missing_ok=True)
        tag.write_text(json.dumps(prov, sort_keys=True))
        return state

    def _finish_model(self, net: M.Network, report: S.TrainReport, path: Path, prov: dict) -> dict:
        report.extra["test_acc_final"] = report.final_acc
        report.extra["artifact"] = path.name
        M.save_checkpoint(net, path)
        report.save(_stem(path))
        if getattr(net, "best_state", None):
            best = net.copy()
            best.load_state(net.best_state)
            M.save_checkpoint(best, _stem(path).with_name(_stem(path).name + "_best.ckpt"))
        self._seal(path, prov)
        return report.summary()

    def _summary(self, path: Path) -> dict:
        return json.loads(_stem(path).with_name(_stem(path).name + ".json").read_text())

    def teacher_net(self) -> M.Network:
        return M.load_checkpoint(self._require(self.path("teacher.ckpt")))

    # ------------------------------------------------------------- stages

    def _train_supervised(self, section: str, name: str) -> dict:
        c = self.cfg[section]
        path = self.path(f"{name}.ckpt")
        prov = self._provenance(name, [section], [])
        if self._fresh(path, prov):
            return self._summary(path)
        net = M.BUILDERS[c["arch"]](self.cfg.seed)
        dc = S.DistillConfig(lr=c["lr"], batch_size=c["batch_size"], epochs=c["epochs"], seed=self.cfg.seed,
                             eval_every=c["eval_every"])
        fn = S.train_teacher if section == "teacher" else S.train_student_ce
        net, report = fn(net, self.data("train"), dc, self.data("test"), state_path=self._state(name, prov))
        return self._finish_model(net, report, path, prov)

    def train_teacher(self) -> dict:
        return self._train_supervised("teacher", "teacher")

    def train_student_ce(self) -> dict:
        return self._train_supervised("student_ce", "student_ce")

    def real_subset(self, size: float | None) -> D.Dataset:
        train = self.data("train")
        if size is None:
            return train
        idx = np.sort(np.random.default_rng([self.cfg.seed, n_samples(size)]).choice(
            len(train), n_samples(size), replace=False))
        return train.subset(idx)

    def train_student_kd(self, size: float | None = None) -> dict:
        """Classical KD on real data: the full training set, or a seeded random ``size``% subset."""
        c = dict(self.cfg["student_kd"])
        sections = ["student_kd"] + (["real_kd"] if size is not None else [])
        if size is not None:
            c.update(self.cfg["real_kd"])
        name = "student_kd" if size is None else f"real_kd_{size_key(size)}"
        teacher_path = self._require(self.path("teacher.ckpt"))
        prov = self._provenance(name, sections, [teacher_path])
        prov["size"] = size
        path = self.path(f"{name}.ckpt")
        if self._fresh(path, prov):
            return self._summary(path)
        teacher = M.load_checkpoint(teacher_path)
        student = M.BUILDERS[c["arch"]](self.cfg.seed)
        dc = S.DistillConfig(tau=c["tau"], lam=c["lam"], lr=c["lr"], batch_size=c["batch_size"], epochs=c["epochs"],
                             seed=self.cfg.seed, eval_every=c["eval_every"])
        student, report = S.train_student_kd(student, teacher, self.real_subset(size), dc, self.data("test"),
                                             state_path=self._state(name, prov))
        return self._finish_model(student, report, path, prov)

    def extract_prior(self) -> P.SimilarityMatrix:
        teacher_path = self._require(self.path("teacher.ckpt"))
        prov = self._provenance("prior", ["prior"], [teacher_path])
        path = self.path("prior.csv")
        sim = P.class_similarity(M.load_checkpoint(teacher_path), self.cfg["prior"]["eps_floor"])
        if not self._fresh(path, prov):
            sim.to_csv(self.path("prior_raw.csv"), "raw")
            sim.to_csv(path, "normalized")
            self._seal(path, prov)
        return sim

    def di_schedule(self, size: float) -> list:
        """Rows of (class, beta, count, lr, batch, iterations) without crafting anything."""
        c = self.cfg.sized("di", size)
        rows = []
        for k, b, j, count in I.schedule(10, n_samples(size), len(c["betas"]), c["batch_size"]):
            rows.append((k, c["betas"][b], count, c["lr"], c["batch_size"], c["iterations"]))
        return rows

    def gen_di(self, size: float, prior: str = "class_similarity", progress=None) -> Path:
        c = self.cfg.sized("di", size)
        suffix = "_uniform" if prior == "uniform" else ""
        path = self.path(f"di_{size_key(size)}{suffix}.tset")
        teacher_path = self._require(self.path("teacher.ckpt"))
        prov = self._provenance("gen-di", ["di", f"di.{size_key(size)}", "prior"], [teacher_path])
        prov.update(size=size, prior=prior)
        if self._fresh(path, prov):
            return path
        if self.force and path.exists() and not _prov_path(path).exists():
            # a partial file from an earlier run; generate_transfer_set decides whether it can resume
            try:
                I.load_transfer_set(path, allow_partial=True)
            except Exception:
                path.unlink()
        teacher = M.load_checkpoint(teacher_path)
        sim = (P.uniform_prior(teacher.num_classes) if prior == "uniform"
               else P.class_similarity(teacher, self.cfg["prior"]["eps_floor"]))
        try:
            I.generate_transfer_set(teacher, n_samples(size), c["betas"], c["tau"], c["lr"], c["batch_size"],
                                    c["iterations"], self.cfg.seed, sim, prior, path=path, progress=progress)
        except ProvenanceError:
            if not self.force:
                raise
            path.unlink()
            I.generate_transfer_set(teacher, n_samples(size), c["betas"], c["tau"], c["lr"], c["batch_size"],
                                    c["iterations"], self.cfg.seed, sim, prior, path=path, progress=progress)
        self._seal(path, prov)
        return path

    def gen_ci(self, size: float, progress=None) -> Path:
        c = self.cfg.sized("ci", size)
        path = self.path(f"ci_{size_key(size)}.tset")
        teacher_path = self._require(self.path("teacher.ckpt"))
        prov = self._provenance("gen-ci", ["ci", f"ci.{size_key(size)}"], [teacher_path])
        prov["size"] = size
        if self._fresh(path, prov):
            return path
        teacher = M.load_checkpoint(teacher_path)
        if self.force and path.exists():
            path.unlink()
        I.generate_class_impressions(teacher, n_samples(size), c["lr"], c["batch_size"], self.cfg.seed,
                                     c["max_iterations"], (c["confidence_low"], c["confidence_high"]),
                                     path=path, progress=progress)
        self._seal(path, prov)
        return path

    def augment(self, size: float) -> Path:
        """Write every impression of ``di_<size>`` under all 102 ops (large: 102x the source)."""
        src = self._require(self.path(f"di_{size_key(size)}.tset"))
        path = self.path(f"augmented_{size_key(size)}.tset")
        prov = self._provenance("augment", [], [src])
        if not self._fresh(path, prov):
            n = len(I.load_transfer_set(src))
            log.warning("materialising %d augmented images (%.1f GB); training uses a lazy view instead",
                        n * len(A.OPS), n * len(A.OPS) * 32 * 32 * 8 / 1e9)
            I.save_transfer_set(A.augment_all(I.load_transfer_set(src)), path)
            self._seal(path, prov)
        return path

    def _tset_path(self, source: str, size: float) -> Path:
        names = {"di": f"di_{size_key(size)}.tset", "ci": f"ci_{size_key(size)}.tset",
                 "di_uniform": f"di_{size_key(size)}_uniform.tset"}
        return self.path(names[source])

    def zskd(self, size: float, source: str = "di", allow_mismatch: bool = False) -> dict:
        """Distil a fresh student on one transfer set with the soft-target objective only."""
        c = self.cfg.sized("zskd", size)
        sections = ["zskd", f"zskd.{size_key(size)}"]
        if source == "ci":
            sections.append(f"ci.{size_key(size)}")
            c["lr"] = self.cfg.sized("ci", size)["student_lr"]
        teacher_path = self._require(self.path("teacher.ckpt"))
        tset_path = self._require(self._tset_path(source, size))
        name = f"zskd_{source}_{size_key(size)}"
        prov = self._provenance(name, sections, [teacher_path, tset_path])
        path = self.path(f"{name}.ckpt")
        if self._fresh(path, prov):
            return self._summary(path)
        teacher = M.load_checkpoint(teacher_path)
        student = M.BUILDERS[c["arch"]](self.cfg.seed)
        dc = S.DistillConfig(tau=c["tau"], lam=0.0, lr=c["lr"], batch_size=c["batch_size"], epochs=c["epochs"],
                             seed=self.cfg.seed, eval_every=c["eval_every"])
        student, report = S.zskd_distill(student, teacher, I.load_transfer_set(tset_path), dc, self.data("test"),
                                         allow_mismatch=allow_mismatch, state_path=self._state(name, prov))
        report.extra.update(source=source, size=size)
        return self._finish_model(student, report, path, prov)

    def finetune(self, size: float | None = None, allow_mismatch: bool = False) -> dict:
        """Second phase: continue from ``zskd_di_<size>`` on original plus augmented impressions."""
        c = self.cfg["finetune"]
        size = c["size"] if size is None else size
        teacher_path = self._require(self.path("teacher.ckpt"))
        tset_path = self._require(self._tset_path("di", size))
        base_path = self._require(self.path(f"zskd_di_{size_key(size)}.ckpt"))
        name = f"finetune_{size_key(size)}"
        prov = self._provenance(name, ["finetune", "zskd"], [teacher_path, tset_path, base_path])
        prov["size"] = size
        path = self.path(f"{name}.ckpt")
        if self._fresh(path, prov):
            return self._summary(path)
        teacher = M.load_checkpoint(teacher_path)
        student = M.load_checkpoint(base_path)
        tset = I.load_transfer_set(tset_path)
        dc = S.DistillConfig(tau=self.cfg["zskd"]["tau"], lam=0.0, lr=c["lr"], batch_size=c["batch_size"],
                             epochs=c["epochs"], seed=self.cfg.seed, eval_every=c["eval_every"])
        student, report = S.finetune_augmented(student, teacher, tset, A.AugmentedView(tset.images), dc,
                                               self.data("test"), allow_mismatch=allow_mismatch,
                                               state_path=self._state(name, prov))
        report.extra.update(size=size)
        return self._finish_model(student, report, path, prov)

    def evaluate(self, checkpoint) -> float:
        return S.evaluate(M.load_checkpoint(checkpoint), self.data("test"))

    # ----------------------------------------------------- sweeps, reports

    def sweep(self, fractions=None, methods=None) -> Path:
        """Accuracy per (fraction, method) as CSV; runs whatever stages are missing."""
        fractions = self.cfg["sweep"]["fractions"] if fractions is None else fractions
        methods = self.cfg["sweep"]["methods"] if methods is None else methods
        rows = []
        for f in fractions:
            for m in methods:
                if m == "DI":
                    self.gen_di(f)
                    s = self.zskd(f, "di")
                elif m == "CI":
                    self.gen_ci(f)
                    s = self.zskd(f, "ci")
                else:
                    s = self.train_student_kd(f)
                rows.append((size_key(f), n_samples(f), m, _pct(s["final_acc"]), _pct(s["best_acc"])))
        path = self.path("sweep.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction_percent", "samples", "method", "accuracy", "best_accuracy"])
            w.writerows(rows)
        return path

    def report(self) -> Path:
        """Markdown and CSV table of every finished model, in table-row order."""
        ft = size_key(self.cfg["finetune"]["size"])
        candidates = [("Teacher-CE", "teacher"), ("Student-CE", "student_ce"), ("Student-KD", "student_kd"),
                      ("ZSKD", f"finetune_{ft}"), ("ZSKD without augmentation", f"zskd_di_{ft}"),
                      ("ZSKD uniform prior", f"zskd_di_uniform_{ft}")]
        rows = []
        for label, stem in candidates:
            p = self.path(f"{stem}.json")
            if p.exists():
                s = json.loads(p.read_text())
                rows.append((label, stem, s.get("final_acc"), s.get("best_acc"), s.get("epochs")))
        fmt = lambda v: "" if v is None else f"{v:.2f}"
        lines = [f"# Results: {self.cfg['experiment']['dataset']}", "",
                 "| Model | Artifact | Final acc (%) | Best acc (%) | Epochs |", "|---|---|---|---|---|"]
        lines += [f"| {r[0]} | {r[1]} | {fmt(r[2])} | {fmt(r[3])} | {r[4]} |" for r in rows]
        md = self.path("report.md")
        md.write_text("\n".join(lines) + "\n")
        with open(self.path("report.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "artifact", "final_acc", "best_acc", "epochs"])
            w.writerows(rows)
        return md
