"""Stage orchestration: corpus -> encoders -> domain classifier -> fusion -> report.

Every stage writes into ``<workdir>/<stage>/<hash>/`` where the hash covers
the stage's own config section plus the hashes of its upstream stages, so a
changed config can never pick up a stale checkpoint.  A stage directory is
committed by writing ``stage.json`` last; it lists a SHA-256 for every
artifact, which downstream stages verify before use.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.metrics import silhouette_score

from . import corpus as corpus_mod
from .config import ExperimentConfig, dumps_toml, stable_hash
from .corpus import Manifest, Record, SEVERITY_BANDS, build_trials, write_trials
from .domain import (ADULT, CHILD, DomainClassifier, RatioConfig, ratio_harness, ratio_table_tsv,
                     train_domain_classifier)
from .encoder import (Encoder, SpeakerDataset, embed_many, finetune, load_encoder, save_encoder,
                      train_encoder, wse_merge)
from .evaluation import EvalReport, ScoreSet, build_report, score_matrix, write_scores
from .features import AUGMENTATIONS, augment, logmel, normalize, write_wav
from .fusion import fuse_batch
from .store import EmbeddingTable, read_embeddings, write_embeddings, write_provenance

STAGES = ("gen", "train", "finetune", "train-dc", "embed", "fuse", "eval", "analysis")
TRAINING_STAGES = ("train", "finetune", "train-dc")
UPSTREAM = {
    "gen": (),
    "train": ("gen",),
    "finetune": ("gen", "train"),
    "train-dc": ("gen", "train"),
    "embed": ("gen", "train", "finetune"),
    "fuse": ("embed", "train-dc"),
    "eval": ("gen", "embed", "fuse"),
    "analysis": ("gen", "train", "train-dc"),
}
SYSTEMS = ("A-SV", "C-SV", "AASV", "w/o DC", "WSE")
TEST_SETS = tuple(name for name, _, _ in SEVERITY_BANDS) + ("child", "adult")
STAGE_FILE = "stage.json"


class PrerequisiteError(RuntimeError):
    """An upstream stage has not been run (or training was skipped)."""


class ArtifactError(RuntimeError):
    """A committed artifact no longer matches its recorded checksum."""


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    h = {"gen": stable_hash("gen", cfg.section("corpus"), cfg.virtual)}
    h["train"] = stable_hash("train", h["gen"], cfg.section("train"))
    h["finetune"] = stable_hash("finetune", h["train"], cfg.section("finetune"))
    h["train-dc"] = stable_hash("train-dc", h["train"], cfg.section("domain"))
    h["embed"] = stable_hash("embed", h["finetune"], cfg.eval.wse_alpha)
    h["fuse"] = stable_hash("fuse", h["embed"], h["train-dc"])
    h["eval"] = stable_hash("eval", h["fuse"], cfg.section("eval"))
    h["analysis"] = stable_hash("analysis", h["train-dc"], cfg.section("analysis"))
    return h


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name.lower()).strip("_")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


class Pipeline:
    """Runs and caches the stages of one experiment config."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1, skip_train: bool = False,
                 log: Callable[[str], None] = print):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.threads = max(1, int(threads))
        self.skip_train = skip_train
        self.log = log
        self.hashes = stage_hashes(cfg)
        self._audio: dict[str, np.ndarray] = {}
        self._feats: dict[str, np.ndarray] = {}
        self._manifest: Manifest | None = None
        self.current: str | None = None

    # -- stage bookkeeping --------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage / self.hashes[stage][:16]

    def is_done(self, stage: str) -> bool:
        return (self.stage_dir(stage) / STAGE_FILE).exists()

    def verify(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        meta_path = d / STAGE_FILE
        if not meta_path.exists():
            hint = "" if stage in TRAINING_STAGES and self.skip_train else f"; run `aasv {stage}` first"
            raise PrerequisiteError(f"stage {stage!r} has no committed artifacts for this config ({d}){hint}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        for rel, digest in meta["artifacts"].items():
            p = d / rel
            if not p.exists():
                raise ArtifactError(f"{stage}: artifact {p} is missing; delete {d} to rebuild")
            if sha256_file(p) != digest:
                raise ArtifactError(f"{stage}: checksum mismatch for {p}; delete {d} to rebuild")
        return d

    def _commit(self, stage: str, d: Path) -> None:
        # the echo leaves out the workdir so a stage dir is byte-identical wherever it lives
        (d / "config.toml").write_text(dumps_toml(self.cfg, include_workdir=False), encoding="utf-8")
        artifacts = {str(p.relative_to(d)): sha256_file(p)
                     for p in sorted(d.rglob("*")) if p.is_file() and p.name != STAGE_FILE}
        meta = {"stage": stage, "hash": self.hashes[stage],
                "inputs": {u: self.hashes[u] for u in UPSTREAM[stage]}, "artifacts": artifacts}
        _write_json(d / STAGE_FILE, meta)

    def run(self, stage: str, upstream: bool = False, _nested: bool = False) -> Path:
        """Run ``stage`` unless already committed; with ``upstream`` also run missing prerequisites."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if self.is_done(stage):
            d = self.verify(stage)
            if not _nested:
                self.log(f"[{stage}] up to date ({d})")
            return d
        if stage in TRAINING_STAGES and self.skip_train:
            raise PrerequisiteError(f"--skip-train given but stage {stage!r} has no checkpoint "
                                    f"for this config ({self.stage_dir(stage)})")
        for u in UPSTREAM[stage]:
            if upstream:
                self.run(u, upstream=True, _nested=True)
            else:
                self.verify(u)
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        stale = d / STAGE_FILE
        if stale.exists():
            stale.unlink()
        self.log(f"[{stage}] running -> {d}")
        self.current = stage
        getattr(self, "_stage_" + stage.replace("-", "_"))(d)
        self._commit(stage, d)
        self.current = None
        return d

    # -- data access ----------------------------------------------------------

    def _map(self, fn, items: Sequence) -> list:
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def manifest(self) -> Manifest:
        if self._manifest is None:
            self._manifest = Manifest.read(self.verify("gen") / "manifest.jsonl")
        return self._manifest

    def audio(self, records: Sequence[Record]) -> list[np.ndarray]:
        root = self.stage_dir("gen")
        todo = [r for r in records if r.utterance_id not in self._audio]
        for r, wav in zip(todo, self._map(lambda rec: corpus_mod.load_audio(rec, root), todo)):
            self._audio[r.utterance_id] = wav
        return [self._audio[r.utterance_id] for r in records]

    def features(self, records: Sequence[Record]) -> list[np.ndarray]:
        """Clean, normalised log-mel matrices (the inference view)."""
        mode = self.cfg.train.normalization
        todo = [r for r in records if r.utterance_id not in self._feats]
        wavs = self.audio(todo)
        for r, f in zip(todo, self._map(lambda w: normalize(logmel(w), mode), wavs)):
            self._feats[r.utterance_id] = f
        return [self._feats[r.utterance_id] for r in records]

    def augmented_features(self, records: Sequence[Record], rng_key: int) -> list[np.ndarray]:
        """One randomly augmented view per utterance, seeded per utterance."""
        tc = self.cfg.train
        wavs = self.audio(records)

        def view(i: int) -> np.ndarray:
            rng = np.random.default_rng([self.cfg.seed, rng_key, i])
            kind, out = augment(wavs[i], tc.augment, rng, AUGMENTATIONS[i % len(AUGMENTATIONS)])
            feats = logmel(out) if out.ndim == 1 else out
            return normalize(feats, tc.normalization)

        return self._map(view, list(range(len(records))))

    def encoder(self, stage: str) -> Encoder:
        name = {"train": "theta_a.ckpt", "finetune": "theta_c.ckpt"}[stage]
        return load_encoder(self.verify(stage) / name)[0]

    def classifier(self) -> DomainClassifier:
        return DomainClassifier.load(self.verify("train-dc") / "domain.ckpt")[0]

    def _dataset(self, records: Sequence[Record]) -> SpeakerDataset:
        return SpeakerDataset(self.audio(records), [r.speaker_id for r in records])

    # -- stages -----------------------------------------------------------------

    def _stage_gen(self, d: Path) -> None:
        c = self.cfg.corpus
        manifest = corpus_mod.build_splits(corpus_mod.gen_speakers(c), c)
        if not self.cfg.virtual:
            (d / "wav").mkdir(exist_ok=True)

            def materialise(rec: Record) -> None:
                write_wav(d / "wav" / f"{rec.utterance_id}.wav", corpus_mod.load_audio(rec))

            self._map(materialise, manifest.records)
            for rec in manifest.records:
                rec.path = f"wav/{rec.utterance_id}.wav"
        manifest.write(d / "manifest.jsonl")
        self._manifest = manifest
        self.log(f"[gen] {len(manifest)} utterances, {len({r.speaker_id for r in manifest})} speakers")

    def _train_log(self, d: Path, log, n_utts: int, batch_size: int, epochs: int) -> None:
        body = log.to_dict()
        body.update(epochs=epochs, batches_per_epoch=-(-n_utts // batch_size))
        _write_json(d / "train_log.json", body)

    def _stage_train(self, d: Path) -> None:
        tc = self.cfg.train
        recs = self.manifest().select(split="train", domain="adult")
        enc, head, log = train_encoder(self._dataset(recs), tc)
        save_encoder(d / "theta_a.ckpt", enc, head, epoch=tc.epochs, extra={"stage_hash": self.hashes["train"]})
        self._train_log(d, log, len(recs), tc.batch_size, tc.epochs)
        self.log(f"[train] final epoch loss {log.epoch_loss[-1]:.3f}, accuracy {log.epoch_accuracy[-1]:.3f}"
                 if log.epoch_loss else "[train] zero epochs")

    def _stage_finetune(self, d: Path) -> None:
        tc = self.cfg.finetune
        source = self.encoder("train")
        recs = self.manifest().select(split="train", domain="child")
        enc, head, log = finetune(source, self._dataset(recs), tc)
        save_encoder(d / "theta_c.ckpt", enc, head, epoch=tc.epochs,
                     extra={"stage_hash": self.hashes["finetune"], "source": self.hashes["train"]})
        self._train_log(d, log, len(recs), tc.batch_size, tc.epochs)
        self.log(f"[finetune] final epoch loss {log.epoch_loss[-1]:.3f}, accuracy {log.epoch_accuracy[-1]:.3f}"
                 if log.epoch_loss else "[finetune] zero epochs")

    def _stage_train_dc(self, d: Path) -> None:
        enc = self.encoder("train")
        recs = self.manifest().select(dc_train=True)
        labels = np.array([CHILD if r.domain == "child" else ADULT for r in recs])
        clean = embed_many(self.features(recs), enc)
        views = embed_many(self.augmented_features(recs, rng_key=31), enc)
        clf, rep = train_domain_classifier(clean, labels, self.cfg.domain, augmented=views[None])
        clf.save(d / "domain.ckpt", extra={"stage_hash": self.hashes["train-dc"]})
        body = asdict(rep)
        body["batches_per_epoch"] = -(-rep.n_train // self.cfg.domain.batch_size)
        body["epochs"] = self.cfg.domain.epochs
        _write_json(d / "train_log.json", body)
        self.log(f"[train-dc] held-out accuracy {rep.accuracy:.4f}, balanced {rep.balanced_accuracy:.4f}, "
                 f"F1 {rep.f1:.4f}")

    def test_records(self) -> list[Record]:
        return self.manifest().select(split="test")

    def _stage_embed(self, d: Path) -> None:
        recs = self.test_records()
        ids = [r.utterance_id for r in recs]
        feats = self.features(recs)
        enc_a, enc_c = self.encoder("train"), self.encoder("finetune")
        alpha = self.cfg.eval.wse_alpha
        for name, enc in (("adult", enc_a), ("child", enc_c), ("wse", wse_merge(enc_a, enc_c, alpha))):
            write_embeddings(d / f"{name}.emb", EmbeddingTable(ids, embed_many(feats, enc), {"encoder": name}))

    def _stage_fuse(self, d: Path) -> None:
        e = self.verify("embed")
        ta, tc = read_embeddings(e / "adult.emb"), read_embeddings(e / "child.emb")
        ids = ta.ids
        ec = tc.rows(ids)
        p = self.classifier().posteriors(ta.values)
        write_embeddings(d / "aasv.emb", EmbeddingTable(ids, fuse_batch(ec, ta.values, p), {"mode": "aasv"}))
        write_provenance(d / "aasv.emb", ids, p)
        write_embeddings(d / "plain-concat.emb",
                         EmbeddingTable(ids, fuse_batch(ec, ta.values, None), {"mode": "plain-concat"}))

    def trial_sets(self) -> dict[str, list]:
        recs = self.test_records()
        sets = {}
        n_pos, n_neg = self.cfg.eval.n_pos, self.cfg.eval.n_neg
        for k, (name, lo, hi) in enumerate(SEVERITY_BANDS):
            band = [r for r in recs if r.domain == "child" and lo <= r.severity < hi]
            rng = np.random.default_rng([self.cfg.seed, 41, k])
            sets[name] = build_trials(band, n_pos, n_neg, rng)
        adults = [r for r in recs if r.domain == "adult"]
        sets["adult"] = build_trials(adults, n_pos, n_neg, np.random.default_rng([self.cfg.seed, 41, 99]))
        return sets

    def _stage_eval(self, d: Path) -> None:
        e, f = self.verify("embed"), self.verify("fuse")
        tables = {
            "A-SV": read_embeddings(e / "adult.emb"),
            "C-SV": read_embeddings(e / "child.emb"),
            "AASV": read_embeddings(f / "aasv.emb"),
            "w/o DC": read_embeddings(f / "plain-concat.emb"),
            "WSE": read_embeddings(e / "wse.emb"),
        }
        sets = self.trial_sets()
        (d / "trials").mkdir(exist_ok=True)
        (d / "scores").mkdir(exist_ok=True)
        for name, trials in sets.items():
            write_trials(d / "trials" / f"{name}.txt", trials)
        excluded = set(self.cfg.eval.exclude)
        cells: dict[tuple[str, str], ScoreSet | None] = {}
        for system, table in tables.items():
            band_scores = []
            for name, trials in sets.items():
                scores = score_matrix(trials, table.ids, table.values)
                write_scores(d / "scores" / f"{_slug(system)}.{name}.txt", trials, scores)
                if name != "adult":
                    band_scores.append(scores)
                cells[(system, name)] = scores
            cells[(system, "child")] = ScoreSet.concat(band_scores)
            for name in TEST_SETS:
                if f"{system}:{name}" in excluded:
                    cells[(system, name)] = None
        ckpts = {s: sha256_file(self.verify(s) / n) for s, n in
                 (("train", "theta_a.ckpt"), ("finetune", "theta_c.ckpt"), ("train-dc", "domain.ckpt"))}
        meta = {"seed": self.cfg.seed, "checkpoints": ckpts, "wse_alpha": self.cfg.eval.wse_alpha,
                "trials_per_set": {"target": self.cfg.eval.n_pos, "nontarget": self.cfg.eval.n_neg}}
        report = build_report(cells, SYSTEMS, TEST_SETS, meta)
        write_report(d, report)
        self.log("[eval]\n" + report.to_text())

    def _stage_analysis(self, d: Path) -> None:
        enc = self.encoder("train")
        a = self.cfg.analysis
        m = self.manifest()
        thr = self.cfg.corpus.dc_threshold

        # ratio harness: adult utterances are added speaker by speaker
        rng = np.random.default_rng([self.cfg.seed, 51])
        adult_train = m.select(split="train", domain="adult")
        speakers = sorted({r.speaker_id for r in adult_train})
        order = {s: i for i, s in enumerate(rng.permutation(speakers))}
        adult_train = sorted(adult_train, key=lambda r: (order[r.speaker_id], r.utterance_id))
        child_train = [r for r in m.select(split="train", domain="child") if r.severity >= thr]
        child_train = [child_train[i] for i in rng.permutation(len(child_train))]
        adult_test = m.select(split="test", domain="adult")
        child_test = [r for r in m.select(split="test", domain="child") if r.severity >= thr]
        emb = {k: embed_many(self.features(v), enc) for k, v in
               (("at", adult_train), ("ct", child_train), ("ae", adult_test), ("ce", child_test))}
        rows = ratio_harness(RatioConfig(list(a.ratio_pairs), self.cfg.seed), emb["at"], emb["ct"],
                             emb["ae"], emb["ce"], self.cfg.domain, shuffle=False)
        (d / "ratio.tsv").write_text(ratio_table_tsv(rows), encoding="utf-8")

        # cluster separation of fixed-severity child cohorts against test adults
        adults = [r for r in adult_test if int(r.utterance_id.rsplit("-u", 1)[1]) < a.cohort_utts]
        e_adult = embed_many(self.features(adults), enc)
        sil = {}
        for k, sev in enumerate(a.cohort_severities):
            cohort = corpus_mod.gen_cohort(sev, a.cohort_speakers, a.cohort_utts, self.cfg.corpus,
                                           prefix=f"k{k}")
            e_child = embed_many(self.features(cohort), enc)
            x = np.concatenate([e_child, e_adult])
            y = np.concatenate([np.zeros(len(e_child)), np.ones(len(e_adult))])
            sil[f"{sev:g}"] = float(silhouette_score(x, y, metric="cosine"))
        _write_json(d / "silhouette.json", {"severity_silhouette": sil, "adult_utterances": len(adults)})
        self.log("[analysis] ratio harness\n" + ratio_table_tsv(rows) + f"[analysis] silhouette {sil}")

    # -- pattern checks -----------------------------------------------------------

    def pattern(self) -> list[Check]:
        report = read_report(self.verify("eval"))
        dc = json.loads((self.verify("train-dc") / "train_log.json").read_text(encoding="utf-8"))
        an = self.verify("analysis")
        ratio = read_ratio_tsv(an / "ratio.tsv")
        sil = json.loads((an / "silhouette.json").read_text(encoding="utf-8"))["severity_silhouette"]
        checks = pattern_checks(report)
        checks += domain_checks(dc, ratio, sil, self.cfg.analysis.cohort_severities)
        return checks


# ---------------------------------------------------------------------------
# report files and checks
# ---------------------------------------------------------------------------


def write_report(d: Path, report: EvalReport) -> None:
    (d / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (d / "report.txt").write_text(report.to_text(), encoding="utf-8")
    body = {"systems": report.systems, "test_sets": report.test_sets, "metadata": report.metadata,
            "eer_percent": [[s, t, v] for s, t, v in report.rows]}
    _write_json(d / "report.json", body)


def read_report(d: Path) -> EvalReport:
    body = json.loads((Path(d) / "report.json").read_text(encoding="utf-8"))
    cells = {(s, t): v for s, t, v in body["eer_percent"]}
    return EvalReport(body["systems"], body["test_sets"], cells, body["metadata"])


def read_ratio_tsv(path: Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:] if line]


def pattern_checks(report: EvalReport, tol: float = 2.0) -> list[Check]:
    """The specialist-versus-fusion EER pattern on pooled-child and adult sets."""
    g = report.get
    checks = []

    def cell(system, test_set):
        v = g(system, test_set)
        if v is None:
            raise ValueError(f"report cell {system}/{test_set} is excluded but needed for the pattern checks")
        return v

    a_child, a_adult = cell("A-SV", "child"), cell("A-SV", "adult")
    c_child, c_adult = cell("C-SV", "child"), cell("C-SV", "adult")
    f_child, f_adult = cell("AASV", "child"), cell("AASV", "adult")
    n_child = cell("w/o DC", "child")
    checks.append(Check("a. adult specialist degrades on children", a_child >= a_adult + 10,
                        f"A-SV child {a_child:.2f} vs adult {a_adult:.2f} (need gap >= 10)"))
    checks.append(Check("b. child specialist forgets adults", c_adult >= a_adult + 5,
                        f"C-SV adult {c_adult:.2f} vs A-SV adult {a_adult:.2f} (need gap >= 5)"))
    best_child, best_adult = min(a_child, c_child), min(a_adult, c_adult)
    checks.append(Check("c. fusion tracks the better specialist",
                        f_child <= best_child + tol and f_adult <= best_adult + tol,
                        f"AASV child {f_child:.2f} vs best {best_child:.2f}; "
                        f"adult {f_adult:.2f} vs best {best_adult:.2f} (tolerance {tol})"))
    checks.append(Check("d. dropping the classifier hurts children", n_child >= f_child + 2,
                        f"w/o DC child {n_child:.2f} vs AASV child {f_child:.2f} (need gap >= 2)"))
    wse = [g("WSE", t) for t in report.test_sets]
    checks.append(Check("e. weight-space ensemble row present",
                        any(v is not None for v in wse) and all(v is None or 0 <= v <= 100 for v in wse),
                        "WSE " + " ".join("-" if v is None else f"{v:.2f}" for v in wse)))
    return checks


def domain_checks(dc_log: dict, ratio_rows: list[dict], silhouette: dict,
                  severities: Sequence[float]) -> list[Check]:
    checks = [Check("domain classifier quality",
                    dc_log["balanced_accuracy"] >= 0.95 and dc_log["f1"] >= 0.95,
                    f"balanced accuracy {dc_log['balanced_accuracy']:.4f}, F1 {dc_log['f1']:.4f} (need >= 0.95)")]
    by_ratio = {r["ratio"]: r for r in ratio_rows}
    first, last = ratio_rows[0], ratio_rows[-1]
    adult_up = float(last["adult_acc"]) > float(first["adult_acc"])
    child_ok = all(float(r["child_acc"]) >= 0.95 for r in ratio_rows)
    checks.append(Check("ratio harness trend", adult_up and child_ok,
                        f"adult acc {first['ratio']} {float(first['adult_acc']):.4f} -> {last['ratio']} "
                        f"{float(last['adult_acc']):.4f}; min child acc "
                        f"{min(float(r['child_acc']) for r in by_ratio.values()):.4f}"))
    hi, lo = (silhouette[f"{s:g}"] for s in severities)
    checks.append(Check("severity cluster separation", hi > 0.3 and hi > lo,
                        f"silhouette {severities[0]:g}: {hi:.3f}, {severities[1]:g}: {lo:.3f} "
                        f"(need first > 0.3 and > second)"))
    return checks


def format_checks(checks: Sequence[Check]) -> str:
    return "".join(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}\n" for c in checks)
