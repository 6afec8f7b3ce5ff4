"""Command-line pipeline: synth -> train -> analyze -> name -> detect -> report.

Each stage reads and writes plain files in the output directory, so stages
can be rerun independently. Exit codes: 0 ok, 2 config/validation error,
3 numerical failure, 4 endpoint failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autonaming as an
from . import embedding_io as eio
from . import metrics as mt
from . import sae, synthgen
from .config import PipelineConfig, derive_seed, load_config
from .errors import ConfigError, InsufficientNegatives, InsufficientPositives, SaeError

log = logging.getLogger("monosae")

EMBEDDINGS = "embeddings.saem"
LABELS = "labels.csv"
CODES = "codes.saem"
GROUND_TRUTH = "ground_truth.json"
MANIFEST = "manifest.csv"
CHECKPOINT = "checkpoint.saem"
PROGRESS = "train_progress.jsonl"
TRAIN_REPORT = "train_report.json"
PROFILES_SAE = "profiles_sae.jsonl"
PROFILES_RAW = "profiles_raw.jsonl"
SUMMARY = "analysis_summary.json"
CORRELATION = "correlation_sae.saem"
FINDINGS = "findings.jsonl"
TRANSCRIPTS = "transcripts"
DETECT_SUMMARY = "detection_repeats.jsonl"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---- stages --------------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig) -> dict:
    s = cfg.synth
    out = Path(cfg.paths.output_dir)
    gt = synthgen.gen_ground_truth(s.d, s.t, s.k, s.sparsity, derive_seed(cfg.seed, "synth.dictionary"))
    x, labels, codes = synthgen.gen_samples(gt, s.n, s.noise_sigma, derive_seed(cfg.seed, "synth.samples"))
    out.mkdir(parents=True, exist_ok=True)
    eio.write_matrix(x, out / EMBEDDINGS)
    eio.write_labels(labels, out / LABELS)
    eio.write_matrix(codes, out / CODES)
    gt.save(out / GROUND_TRUTH)
    if s.render_images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        entries = {}
        for i, row in enumerate(x):
            name = f"images/sample_{i:06d}.pgm"
            (out / name).write_bytes(synthgen.render_image(row))
            entries[i] = name
        an.write_manifest(entries, out / MANIFEST)
    active = (codes > 0).sum(axis=1)
    summary = {
        "d": gt.d,
        "t": gt.t,
        "k": gt.k,
        "n": s.n,
        "mean_active_features": float(active.mean()),
        "label_prevalence": labels.values.mean(axis=0).round(4).tolist(),
    }
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_train(cfg: PipelineConfig) -> sae.TrainReport:
    paths = cfg.paths
    train_path = _require(paths.resolve("train_embeddings", EMBEDDINGS), "train embeddings")
    _require(paths.resolve("labels", LABELS), "labels")
    out = Path(paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    raw = eio.read_matrix(train_path)
    stats = eio.fit_normalization(raw)
    data = eio.apply_normalization(raw, stats)
    with open(out / PROGRESS, "w", encoding="utf-8") as progress:

        def on_epoch(record):
            progress.write(json.dumps(record, sort_keys=True) + "\n")
            if record["epoch"] % 10 == 0 or record["epoch"] == cfg.train.epochs - 1:
                log.info("epoch %(epoch)d total %(total).5g l0 %(l0_rate).4f dead %(dead_fraction).3f", record)

        params, report = sae.train(cfg.train, data, on_epoch=on_epoch)
    sae.save_checkpoint(out / CHECKPOINT, params, cfg.train, stats, epoch=cfg.train.epochs)
    _dump_json(
        {
            "l0_rate": report.l0_rate,
            "fve": report.fve,
            "dead_fraction": report.dead_fraction,
            "final_loss": report.losses[-1].__dict__ if report.losses else None,
            "wall_time": report.wall_time,
        },
        out / TRAIN_REPORT,
    )
    print(json.dumps({"fve": report.fve, "l0_rate": report.l0_rate, "dead_fraction": report.dead_fraction}))
    return report


def _load_eval(cfg: PipelineConfig, checkpoint: Path):
    params, sidecar, stats = sae.load_checkpoint(_require(checkpoint, "checkpoint"))
    paths = cfg.paths
    eval_path = paths.eval_embeddings or paths.train_embeddings
    eval_path = _require(Path(eval_path) if eval_path else paths.out(EMBEDDINGS), "eval embeddings")
    labels = eio.read_labels(_require(paths.resolve("labels", LABELS), "labels"))
    raw = eio.read_matrix(eval_path)
    if raw.shape[0] != labels.n:
        raise ConfigError(f"{raw.shape[0]} eval embeddings but {labels.n} label rows")
    data = eio.apply_normalization(raw, stats) if stats is not None else raw
    return params, data, labels


def cmd_analyze(cfg: PipelineConfig, checkpoint: Path | None = None) -> dict:
    out = Path(cfg.paths.output_dir)
    params, data, labels = _load_eval(cfg, checkpoint or out / CHECKPOINT)
    mc = cfg.metrics
    z = mt.activation_matrix(params, data, mc.chunk_size)
    alive, dead_fraction = sae.dead_neurons(z, mc.dead_threshold)
    sae_profiles = mt.build_profiles(z, labels, alive=alive, top_count=mc.top_count)
    raw_profiles = mt.raw_feature_profiles(data, labels, top_count=mc.top_count)
    mt.write_profiles(sae_profiles, out / PROFILES_SAE)
    mt.write_profiles(raw_profiles, out / PROFILES_RAW)
    if mc.export_correlation:
        eio.write_matrix(mt.pearson(z, labels).values, out / CORRELATION)

    def entropy_variants(profiles):
        excl = mt.mean_entropy(profiles)
        incl = mt.mean_entropy(profiles, include_dead=True, k=labels.k)
        return {"dead_excluded": excl.mean, "dead_included": incl.mean, "defined": excl.defined, "excluded": excl.excluded}

    summary = {
        "mean_entropy_sae": entropy_variants(sae_profiles),
        "mean_entropy_raw": entropy_variants(raw_profiles),
        "max_entropy": math.log2(labels.k),
        "l0_rate": sae.l0_rate(z),
        "fve": sae.fve(data, sae.decode(params, z)),
        "dead_fraction": dead_fraction,
        "neurons": params.m,
        "raw_dimensions": params.d,
        "labels": list(labels.names),
    }
    gt_path = cfg.paths.resolve("ground_truth", GROUND_TRUTH)
    if gt_path.exists():
        gt = synthgen.GroundTruth.load(gt_path)
        if gt.d == params.d:
            score, _ = synthgen.recovery_score(params.w_dec, gt, alive if alive.any() else None)
            summary["recovery_score"] = score
    _dump_json(summary, out / SUMMARY)
    print(json.dumps(summary, sort_keys=True))
    return summary


def select_neurons(profiles: list[mt.NeuronProfile], cap: int) -> list[mt.NeuronProfile]:
    """Alive neurons with a defined entropy, strongest label correlation first."""
    pool = [p for p in profiles if p.alive and p.entropy is not None]
    pool.sort(key=lambda p: (-p.best_abs_correlation, p.neuron_id))
    return pool[:cap]


def make_client(cfg: PipelineConfig, mock: str | None, truth=None, namer=None) -> an.VlmClient:
    if mock is None:
        return an.HttpVlmClient(cfg.naming.endpoint)
    if mock == "oracle":
        return an.OracleMock(truth, namer)
    if mock == "random":
        return an.RandomMock(derive_seed(cfg.seed, "mock.random"))
    if mock.startswith("scripted:"):
        return an.ScriptedMock.from_file(mock.split(":", 1)[1], max_retries=cfg.naming.endpoint.max_retries)
    raise ConfigError(f"unknown mock {mock!r}; expected oracle, random or scripted:PATH")


def _image_lookup(cfg: PipelineConfig):
    manifest = cfg.paths.resolve("image_manifest", MANIFEST)
    return an.load_manifest(_require(manifest, "image manifest"))


def cmd_name(
    cfg: PipelineConfig,
    checkpoint: Path | None = None,
    profiles_path: Path | None = None,
    mock: str | None = None,
) -> list[an.ConceptFinding]:
    out = Path(cfg.paths.output_dir)
    nc = cfg.naming
    images = _image_lookup(cfg)
    profiles = mt.read_profiles(_require(profiles_path or out / PROFILES_SAE, "SAE profiles"))
    params, data, _ = _load_eval(cfg, checkpoint or out / CHECKPOINT)
    z = mt.activation_matrix(params, data, cfg.metrics.chunk_size)

    findings_path = out / FINDINGS
    done = {f.neuron_id for f in an.read_findings(findings_path)}
    set_seed = derive_seed(cfg.seed, "name.detection_set")
    shuffle_seed = derive_seed(cfg.seed, "name.shuffle")

    chosen = select_neurons(profiles, nc.max_neurons)
    sets = {}
    for prof in chosen:
        try:
            sets[prof.neuron_id] = an.build_detection_set(z, prof.neuron_id, nc.n_per_side, set_seed, nc.top_fraction)
        except (InsufficientPositives, InsufficientNegatives) as exc:
            log.warning("skipping neuron %d: %s", prof.neuron_id, exc)
    by_id = {p.neuron_id: p for p in chosen}
    client = make_client(
        cfg,
        mock,
        truth=lambda neuron, idx: idx in sets[neuron].positives,
        namer=lambda neuron: by_id[neuron].best_label_name,
    )
    max_in_flight = 1 if isinstance(client, an.ScriptedMock) else nc.max_in_flight

    new = []
    for prof in chosen:
        nid = prof.neuron_id
        if nid in done or nid not in sets:
            continue
        transcript = an.Transcript(out / TRANSCRIPTS / f"neuron_{nid}.jsonl")
        top = mt.top_activating(z, nid, nc.n_top)
        concept = an.name_neuron(client, nid, [images[i] for i in top], transcript)
        finding = an.run_detection(client, concept, sets[nid], images, shuffle_seed, transcript, max_in_flight)
        an.append_finding(finding, findings_path)
        new.append(finding)
        log.info("neuron %d: %.2f %s", nid, finding.detection_accuracy, concept)
    findings = an.read_findings(findings_path)
    print(json.dumps({"named": len(findings), "new": len(new)}))
    return findings


def cmd_detect(
    cfg: PipelineConfig,
    checkpoint: Path | None = None,
    findings_path: Path | None = None,
    mock: str | None = None,
) -> list[dict]:
    """Re-score existing concepts over several detection sets; reports mean and range."""
    out = Path(cfg.paths.output_dir)
    nc = cfg.naming
    images = _image_lookup(cfg)
    findings = an.read_findings(_require(findings_path or out / FINDINGS, "findings"))
    params, data, _ = _load_eval(cfg, checkpoint or out / CHECKPOINT)
    z = mt.activation_matrix(params, data, cfg.metrics.chunk_size)

    current = {}
    client = make_client(
        cfg,
        mock,
        truth=lambda neuron, idx: idx in current[neuron].positives,
        namer=lambda neuron: "",
    )
    max_in_flight = 1 if isinstance(client, an.ScriptedMock) else nc.max_in_flight
    rows = []
    for f in sorted(findings, key=lambda f: f.neuron_id):
        accs = []
        for r in range(nc.repeats):
            dset = an.build_detection_set(
                z, f.neuron_id, nc.n_per_side, derive_seed(cfg.seed, f"detect.set.{r}"), nc.top_fraction
            )
            current[f.neuron_id] = dset
            transcript = an.Transcript(out / TRANSCRIPTS / f"neuron_{f.neuron_id}.jsonl")
            res = an.run_detection(
                client, f.concept_text, dset, images, derive_seed(cfg.seed, f"detect.shuffle.{r}"), transcript, max_in_flight
            )
            accs.append(res.detection_accuracy)
        rows.append(
            {
                "neuron_id": f.neuron_id,
                "concept_text": f.concept_text,
                "accuracies": accs,
                "mean": float(np.mean(accs)),
                "min": float(np.min(accs)),
                "max": float(np.max(accs)),
            }
        )
    with open(out / DETECT_SUMMARY, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"rescored": len(rows)}))
    return rows


def render_table(rows: list[an.ConceptFinding]) -> str:
    head = ("Neuron", "Accuracy", "Concept Description")
    body = [(str(f.neuron_id), f"{f.detection_accuracy:.2f}", f.concept_text) for f in rows]
    w0 = max([len(head[0])] + [len(r[0]) for r in body])
    w1 = max([len(head[1])] + [len(r[1]) for r in body])
    lines = [f"{head[0]:<{w0}}  {head[1]:>{w1}}  {head[2]}"]
    lines.append("-" * len(lines[0]))
    lines.extend(f"{a:<{w0}}  {b:>{w1}}  {c}" for a, b, c in body)
    return "\n".join(lines) + "\n"


def cmd_report(cfg: PipelineConfig, findings_path: Path | None = None, threshold: float | None = None) -> list[an.ConceptFinding]:
    out = Path(cfg.paths.output_dir)
    threshold = cfg.naming.threshold if threshold is None else threshold
    findings = an.read_findings(findings_path or out / FINDINGS)
    rows = an.rank_findings(findings, threshold)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["neuron", "accuracy", "concept"])
    for f in rows:
        writer.writerow([f.neuron_id, f"{f.detection_accuracy:.4f}", f.concept_text])
    (out / REPORT_CSV).write_text(buf.getvalue(), encoding="utf-8")
    table = render_table(rows)
    (out / REPORT_TXT).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    print(f"{len(rows)} neurons at or above accuracy {threshold:.2f}")
    return rows


# ---- entry point ---------------------------------------------------------------


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies default to SUPPRESS so they never clobber flags given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline JSON config", **kw)
    common.add_argument("--seed", type=int, help="root seed (overrides config)", **kw)
    common.add_argument("--output", type=Path, help="output directory (overrides config)", **kw)
    common.add_argument("--mock", help="oracle | random | scripted:PATH", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="monosae", description=__doc__.splitlines()[0], parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic ground-truth dataset")
    sub.add_parser("train", parents=[common], help="fit normalization and train the SAE")
    p = sub.add_parser("analyze", parents=[common], help="correlation/entropy profiles and summary")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("name", parents=[common], help="name neurons and score detection")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--profiles", type=Path)
    p = sub.add_parser("detect", parents=[common], help="repeat detection for named neurons")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--findings", type=Path)
    p = sub.add_parser("report", parents=[common], help="ranked, deduplicated findings table")
    p.add_argument("--findings", type=Path)
    p.add_argument("--threshold", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.apply_seed(args.seed)
        if args.output is not None:
            cfg.paths.output_dir = str(args.output)
        # one BLAS thread keeps every stage bit-reproducible
        with threadpool_limits(limits=1):
            if args.command == "synth":
                cmd_synth(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "analyze":
                cmd_analyze(cfg, getattr(args, "checkpoint", None))
            elif args.command == "name":
                cmd_name(cfg, args.checkpoint, args.profiles, args.mock)
            elif args.command == "detect":
                cmd_detect(cfg, args.checkpoint, args.findings, args.mock)
            elif args.command == "report":
                cmd_report(cfg, args.findings, args.threshold)
    except SaeError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
