"""Staged pipeline: generate -> train-graph -> train-align -> evaluate.

Every stage writes into its own directory under the artifact root. Outputs are
staged in a scratch directory (each file written to a temp name and renamed) and
the finished directory is swapped in with a rename, so an interrupted command
never leaves a half-written stage behind. Each stage directory carries a
``stage.json`` sidecar with the stage fingerprint and the sha256 of each output.

A fingerprint hashes the stage's config sections, its derived seed and the
digests of the upstream stages it read, so editing one section only reruns the
stages downstream of it.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .align import AlignConfig, retrieval_accuracy, train_align, write_step_log
from .embed import (GraphTrainConfig, Side, community_cosine, link_prediction_eval, load_table, save_table,
                    train_graph_embeddings, write_loss_csv)
from .encoder import EncoderConfig, build_encoder, load_checkpoint, save_checkpoint
from .errors import FormatError, MissingArtifactError, StaleArtifactError, ValidationError
from .graph import split_edges
from .probes import ProbeConfig
from .synthetic import generate_synthetic, load_corpus, save_corpus
from .tasks import DEFAULT_GRID, MetricsReport, TaskSpec, default_tasks, run_task_suite
from .tokenizer import Vocab, build_vocab, tokenize

logger = logging.getLogger(__name__)

STAGES = ("generate", "train-graph", "train-align", "evaluate")
STAGE_DIRS = {"generate": "corpus", "train-graph": "graph", "train-align": "align", "evaluate": "eval"}
UPSTREAM = {
    "generate": (),
    "train-graph": ("generate",),
    "train-align": ("generate", "train-graph"),
    "evaluate": ("generate", "train-graph", "train-align"),
}
SECTIONS = {
    "generate": ("graph",),
    "train-graph": ("embed",),
    "train-align": ("tokenizer", "encoder", "align"),
    "evaluate": ("probes",),
}
SIDECAR = "stage.json"
LOCK_NAME = ".lock"
SIDECAR_VERSION = 1


def _current_umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


_UMASK = _current_umask()


# -- configuration -----------------------------------------------------------------

@dataclass
class GraphSection:
    num_users: int = 400
    num_urls: int = 200
    num_communities: int = 4
    edges_per_user: int = 30
    p_in: float = 0.9
    vocab_size: int = 1000
    topic_mix: float = 0.5


@dataclass
class EmbedSection:
    dim: int = 128
    negatives: int = 5
    learning_rate: float = 0.05
    epochs: int = 10
    negative_sampling: str = "unigram"
    negative_power: float = 0.75
    heldout_fraction: float = 0.1
    workers: int = 1


@dataclass
class TokenizerSection:
    min_freq: int = 1
    max_size: int = 0  # 0 = unlimited


@dataclass
class EncoderSection:
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    dropout: float = 0.1


@dataclass
class AlignSection:
    temperature: float = 0.01
    batch_size: int = 128
    epochs: int = 3
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TaskSection:
    name: str
    labels: str
    pooling: str = "cls"
    activation: str = "tanh"


@dataclass
class ProbesSection:
    hidden: int = 128
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 10
    n_grid: list[int] = field(default_factory=lambda: list(DEFAULT_GRID))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    test_per_class: int = 250
    tasks: list[TaskSection] = field(default_factory=lambda: [
        TaskSection(t.name, t.labels, t.pooling, t.activation) for t in default_tasks()])


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "artifacts"
    graph: GraphSection = field(default_factory=GraphSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    align: AlignSection = field(default_factory=AlignSection)
    probes: ProbesSection = field(default_factory=ProbesSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def section(self, name: str) -> dict:
        return dataclasses.asdict(getattr(self, name))

    def task_specs(self) -> list[TaskSpec]:
        p = self.probes
        return [TaskSpec(t.name, t.labels, t.pooling, t.activation, tuple(p.n_grid), tuple(p.seeds),
                         p.test_per_class) for t in p.tasks]

    def validate(self) -> "PipelineConfig":
        # building each module config runs its own checks
        GraphTrainConfig(dim=self.embed.dim, negatives=self.embed.negatives,
                         learning_rate=self.embed.learning_rate, epochs=self.embed.epochs,
                         workers=self.embed.workers, negative_sampling=self.embed.negative_sampling)
        if not 0 < self.embed.heldout_fraction < 1:
            raise ValidationError("embed.heldout_fraction must lie in (0, 1)")
        self.encoder_config(vocab_size=8)
        self.align_config()
        for key in ("n_grid", "seeds"):
            values = getattr(self.probes, key)
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
                raise ValidationError(f"probes.{key} must be a list of integers")
        if len({t.name for t in self.probes.tasks}) != len(self.probes.tasks):
            raise ValidationError("probe task names must be unique")
        self.task_specs()
        return self

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(vocab_size=vocab_size, layers=e.layers, heads=e.heads, model_dim=e.model_dim,
                             ffn_dim=e.ffn_dim, dropout=e.dropout, pooler_dim=self.embed.dim,
                             seed=stage_seed(self.seed, "train-align"))

    def align_config(self) -> AlignConfig:
        a = self.align
        return AlignConfig(temperature=a.temperature, batch_size=a.batch_size, epochs=a.epochs,
                           learning_rate=a.learning_rate, beta1=a.beta1, beta2=a.beta2, eps=a.eps,
                           seed=stage_seed(self.seed, "train-align"))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if cls is not TaskSection else None
        if cls is ProbesSection and name == "tasks":
            if not isinstance(value, list):
                raise ValidationError("[probes] tasks must be an array of tables")
            value = [_build(TaskSection, t, "probes.tasks") for t in value]
        elif default is not None and (isinstance(value, bool) or (
                not isinstance(value, type(default)) and not (isinstance(default, float) and isinstance(value, int)))):
            raise ValidationError(f"[{where}] {name}: expected {type(default).__name__}, got {value!r}")
        elif isinstance(default, float):
            value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"[{where}] {exc}") from None


def config_from_dict(data: dict) -> PipelineConfig:
    sections = {"graph": GraphSection, "embed": EmbedSection, "tokenizer": TokenizerSection,
                "encoder": EncoderSection, "align": AlignSection, "probes": ProbesSection}
    unknown = sorted(set(data) - set(sections) - {"seed", "out"})
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, data[name], name) for name, cls in sections.items() if name in data}
    for key, typ in (("seed", int), ("out", str)):
        if key in data:
            if not isinstance(data[key], typ) or isinstance(data[key], bool):
                raise ValidationError(f"{key} must be {typ.__name__}")
            kwargs[key] = data[key]
    return PipelineConfig(**kwargs).validate()


def load_config(path: str | os.PathLike | None = None, **overrides) -> PipelineConfig:
    """Parse a TOML config (or take defaults) and apply non-None overrides (seed, out, workers)."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    config = config_from_dict(data)
    if overrides.get("seed") is not None:
        config.seed = int(overrides["seed"])
    if overrides.get("out") is not None:
        config.out = str(overrides["out"])
    if overrides.get("workers") is not None:
        config.embed.workers = int(overrides["workers"])
    return config.validate()


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed derived from the global one."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stage.encode())]).generate_state(1)[0])


# -- artifact bookkeeping ---------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stage_dir(config: PipelineConfig, stage: str) -> Path:
    return config.out_dir / STAGE_DIRS[stage]


def read_sidecar(config: PipelineConfig, stage: str) -> dict | None:
    path = stage_dir(config, stage) / SIDECAR
    if not path.exists():
        return None
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt sidecar ({exc})") from None
    if meta.get("version") != SIDECAR_VERSION:
        raise FormatError(f"{path}: unsupported sidecar version {meta.get('version')}")
    return meta


def verify_outputs(config: PipelineConfig, stage: str, meta: dict) -> bool:
    d = stage_dir(config, stage)
    return all((d / name).exists() and _sha256(d / name) == digest for name, digest in meta["outputs"].items())


def fingerprint(config: PipelineConfig, stage: str, upstream_digests: dict[str, str]) -> str:
    payload = {
        "stage": stage,
        "sections": {name: config.section(name) for name in SECTIONS[stage]},
        "seed": stage_seed(config.seed, stage),
        "upstream": upstream_digests,
    }
    if stage == "train-align":
        # the pooler width follows the graph embedding width
        payload["pooler_dim"] = config.embed.dim
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def expected_fingerprint(config: PipelineConfig, stage: str) -> str | None:
    """Fingerprint the stage would have if every upstream stage is current; None if any is not."""
    digests = {}
    for up in UPSTREAM[stage]:
        meta = read_sidecar(config, up)
        if meta is None or meta["fingerprint"] != expected_fingerprint(config, up):
            return None
        digests[up] = meta["digest"]
    return fingerprint(config, stage, digests)


def is_current(config: PipelineConfig, stage: str) -> bool:
    meta = read_sidecar(config, stage)
    if meta is None:
        return False
    expected = expected_fingerprint(config, stage)
    return expected is not None and meta["fingerprint"] == expected and verify_outputs(config, stage, meta)


def require_upstream(config: PipelineConfig, stage: str, force: bool = False) -> dict[str, str]:
    """Digests of this stage's inputs; raises if one is missing, or stale without ``force``."""
    digests = {}
    for up in UPSTREAM[stage]:
        meta = read_sidecar(config, up)
        if meta is None:
            raise MissingArtifactError(f"missing {STAGE_DIRS[up]}/ artifacts under {config.out_dir}; "
                                       f"run `urlalign {up}` first")
        if not verify_outputs(config, up, meta):
            raise StaleArtifactError(f"{STAGE_DIRS[up]}/ outputs do not match their recorded digests; "
                                     f"rerun `urlalign {up}`")
        if meta["fingerprint"] != expected_fingerprint(config, up):
            msg = (f"{STAGE_DIRS[up]}/ was produced from a different config than the current one; "
                   f"rerun `urlalign {up}` (or `urlalign all`)")
            if not force:
                raise StaleArtifactError(msg + ", or pass --force to use it anyway")
            logger.warning("%s; continuing because of --force", msg)
        digests[up] = meta["digest"]
    return digests


class StageWriter:
    """Collects a stage's files in a scratch directory and swaps it in on commit."""

    def __init__(self, config: PipelineConfig, stage: str):
        self.config = config
        self.stage = stage
        self.final = stage_dir(config, stage)
        config.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{STAGE_DIRS[stage]}-", dir=config.out_dir))
        os.chmod(self.tmp, 0o777 & ~_UMASK)

    def path(self, name: str) -> Path:
        return self.tmp / name

    @contextmanager
    def open(self, name: str, mode: str = "w"):
        """Write to a temp file and rename it into place once the block succeeds."""
        target = self.tmp / name
        fd, tmp_name = tempfile.mkstemp(prefix=f".{name}.", dir=self.tmp)
        kwargs = {} if "b" in mode else {"encoding": "utf-8"}
        try:
            with os.fdopen(fd, mode, **kwargs) as fh:
                yield fh
            os.chmod(tmp_name, 0o666 & ~_UMASK)
            os.replace(tmp_name, target)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise

    def write_json(self, name: str, obj) -> None:
        with self.open(name) as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def commit(self, fingerprint_value: str, upstream: dict[str, str], summary: dict | None = None) -> dict:
        outputs = {p.name: _sha256(p) for p in sorted(self.tmp.iterdir()) if p.is_file() and not p.name.startswith(".")}
        digest = hashlib.sha256(_canonical(outputs).encode()).hexdigest()
        meta = {"version": SIDECAR_VERSION, "stage": self.stage, "fingerprint": fingerprint_value,
                "digest": digest, "upstream": upstream, "outputs": outputs, "summary": summary or {}}
        self.write_json(SIDECAR, meta)
        old = None
        if self.final.exists():
            old = self.final.with_name(self.final.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(self.final, old)
        os.replace(self.tmp, self.final)
        if old is not None:
            shutil.rmtree(old)
        return meta

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


@contextmanager
def artifact_lock(out_dir: Path):
    """One command at a time per artifact directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise RuntimeError(f"{out_dir} is locked by running process {pid}") from None
            logger.warning("removing stale lock left by process %s", pid)
            lock.unlink(missing_ok=True)
    else:
        raise RuntimeError(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- stages ------------------------------------------------------------------------

def _run_stage(config: PipelineConfig, stage: str, body, force: bool) -> dict:
    upstream = require_upstream(config, stage, force)
    fp = fingerprint(config, stage, upstream)
    writer = StageWriter(config, stage)
    try:
        summary = body(writer)
        meta = writer.commit(fp, upstream, summary)
    except BaseException:
        writer.abort()
        raise
    logger.info("%s: wrote %s", stage, writer.final)
    return meta


def cmd_generate(config: PipelineConfig, force: bool = False) -> dict:
    g = config.graph

    def body(w: StageWriter):
        corpus = generate_synthetic(num_users=g.num_users, num_urls=g.num_urls, num_communities=g.num_communities,
                                    edges_per_user=g.edges_per_user, p_in=g.p_in, vocab_size=g.vocab_size,
                                    seed=stage_seed(config.seed, "generate"), topic_mix=g.topic_mix)
        save_corpus(corpus, w.tmp)
        return {"num_edges": corpus.graph.num_edges}

    return _run_stage(config, "generate", body, force)


def _load_heldout(path: Path) -> np.ndarray:
    rows = np.loadtxt(path, dtype=np.int64, delimiter="\t", skiprows=1, ndmin=2)
    return rows.reshape(-1, 2)


def cmd_train_graph(config: PipelineConfig, force: bool = False) -> dict:
    e = config.embed

    def body(w: StageWriter):
        corpus = load_corpus(stage_dir(config, "generate"))
        seed = stage_seed(config.seed, "train-graph")
        train, heldout = split_edges(corpus.graph, e.heldout_fraction, seed=seed)
        cfg = GraphTrainConfig(dim=e.dim, negatives=e.negatives, learning_rate=e.learning_rate, epochs=e.epochs,
                               seed=seed, workers=e.workers, negative_sampling=e.negative_sampling,
                               negative_power=e.negative_power)
        result = train_graph_embeddings(train, cfg)
        save_table(result.users, w.path("users.emb"))
        save_table(result.urls, w.path("urls.emb"))
        write_loss_csv(result.epoch_losses, w.path("loss.csv"))
        with w.open("heldout.tsv") as fh:
            fh.write("user\turl\n")
            for u, v in heldout:
                fh.write(f"{u}\t{v}\n")
        # 99 sampled negatives per held-out edge, fewer when the graph is too small for that
        negatives = min(99, train.num_urls - 1 - int(train.user_degrees.max()))
        lp = link_prediction_eval(result.users, result.urls, heldout, negatives=negatives, seed=seed, exclude=train)
        within, cross = community_cosine(result.urls, corpus.url_community)
        summary = {"negatives": negatives, "mrr": lp.mrr, "hits_at_10": lp.hits_at_10, "within_cosine": within, "cross_cosine": cross,
                   "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}
        w.write_json("metrics.json", summary)
        return summary

    return _run_stage(config, "train-graph", body, force)


def cmd_train_align(config: PipelineConfig, force: bool = False) -> dict:
    t = config.tokenizer

    def body(w: StageWriter):
        corpus = load_corpus(stage_dir(config, "generate"))
        urls = load_table(stage_dir(config, "train-graph") / "urls.emb", expect_dim=config.embed.dim,
                          expect_side=Side.URL)
        vocab = build_vocab(corpus.contents, min_freq=t.min_freq, max_size=t.max_size or None)
        vocab.save(w.path("vocab.tsv"))
        encoder = build_encoder(config.encoder_config(len(vocab)))
        save_checkpoint(encoder, w.path("baseline.ckpt"))
        seqs = [tokenize(c, vocab) for c in corpus.contents]
        result = train_align(encoder, corpus.contents, urls, config.align_config(), sequences=seqs)
        save_checkpoint(result.encoder, w.path("encoder.ckpt"))
        write_step_log(result.step_log, w.path("loss.csv"))
        summary = {"initial_loss": result.initial_loss, "final_loss": result.final_loss,
                   "retrieval_at_1": retrieval_accuracy(result.encoder, corpus.contents, urls, 1, sequences=seqs)}
        w.write_json("metrics.json", summary)
        return summary

    return _run_stage(config, "train-align", body, force)


def cmd_evaluate(config: PipelineConfig, force: bool = False) -> dict:
    p = config.probes

    def body(w: StageWriter):
        align_dir = stage_dir(config, "train-align")
        graph_dir = stage_dir(config, "train-graph")
        corpus = load_corpus(stage_dir(config, "generate"))
        vocab = Vocab.load(align_dir / "vocab.tsv")
        encoders = {"aligned": load_checkpoint(align_dir / "encoder.ckpt"),
                    "unaligned": load_checkpoint(align_dir / "baseline.ckpt")}
        users = load_table(graph_dir / "users.emb", expect_dim=config.embed.dim, expect_side=Side.USER)
        heldout = _load_heldout(graph_dir / "heldout.tsv")
        template = ProbeConfig(num_classes=2, hidden=p.hidden, learning_rate=p.learning_rate,
                               batch_size=p.batch_size, epochs=p.epochs)
        report = run_task_suite(encoders, users, corpus, vocab, heldout, config.task_specs(),
                                seed=stage_seed(config.seed, "evaluate"), probe=template)
        with w.open("metrics.tsv") as fh:
            report.write(fh)
        return {"records": len(report.records)}

    return _run_stage(config, "evaluate", body, force)


COMMANDS = {"generate": cmd_generate, "train-graph": cmd_train_graph, "train-align": cmd_train_align,
            "evaluate": cmd_evaluate}


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> dict:
    with artifact_lock(config.out_dir):
        return COMMANDS[stage](config, force)


def cmd_all(config: PipelineConfig, force: bool = False) -> list[str]:
    """Run every stage whose outputs are missing or out of date; returns the stages that ran."""
    ran = []
    with artifact_lock(config.out_dir):
        for stage in STAGES:
            if is_current(config, stage):
                logger.info("%s: up to date", stage)
                continue
            COMMANDS[stage](config, force)
            ran.append(stage)
    return ran


def load_metrics(config: PipelineConfig) -> MetricsReport:
    path = stage_dir(config, "evaluate") / "metrics.tsv"
    if not path.exists():
        raise MissingArtifactError(f"no metrics report under {config.out_dir}; run `urlalign evaluate` first")
    return MetricsReport.load(path)


def with_overrides(config: PipelineConfig, **sections) -> PipelineConfig:
    """Copy of ``config`` with ``section={key: value}`` replacements applied."""
    new = copy.deepcopy(config)
    for name, values in sections.items():
        target = getattr(new, name)
        for key, value in values.items():
            if not hasattr(target, key):
                raise ValidationError(f"unknown key {name}.{key}")
            setattr(target, key, value)
    return new.validate()


def stage_dir_name(stage: str) -> str:
    return STAGE_DIRS[stage]
