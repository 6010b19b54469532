"""Single command-line entry point; every subcommand delegates to a module."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import datasets, diffusion, evaluation, lora, masks, vlm
from .config import Config
from .errors import ConfigBandError, ParameterBandError, SpillkitError
from .geometry import BBox


def _fail(exc: Exception, code: int, as_json: bool) -> None:
    if as_json:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, ConfigBandError):
            payload["field"] = exc.field_path
        click.echo(json.dumps(payload))
    else:
        click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _load_config(path: str | None, as_json: bool) -> Config:
    try:
        return Config.load(path) if path else Config()
    except (ConfigBandError, ParameterBandError) as exc:
        _fail(exc, 3, as_json)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Path to the shared JSON config file.")
@click.option("--json", "as_json", is_flag=True,
              help="Emit machine-readable JSON output.")
@click.pass_context
def main(ctx, config_path, as_json):
    """Spill-detection pipeline toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["json"] = as_json


def _run(ctx, fn):
    as_json = ctx.obj["json"]
    try:
        fn(as_json)
    except (ConfigBandError, ParameterBandError) as exc:
        _fail(exc, 3, as_json)
    except SpillkitError as exc:
        _fail(exc, 1, as_json)


@main.command("generate-scenes")
@click.option("--count", type=int, default=1)
@click.option("--style-ref", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.pass_context
def generate_scenes(ctx, count, style_ref, out_dir, seed):
    """Build and run scene-generation jobs against the diffusion backend."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        base_seed = cfg.seed if seed is None else seed
        jobs = [diffusion.build_scene_job(cfg.generation, style_ref,
                                          base_seed + i)
                for i in range(count)]
        backend = diffusion.HttpDiffusionBackend(cfg.diffusion_endpoint)
        records = diffusion.run_batch(jobs, backend, out_dir, cfg.parallelism)
        out = [{"job_id": r.job_id, "status": r.status,
                "attempts": r.attempts, "artifact": r.artifact_path}
               for r in records]
        click.echo(json.dumps(out) if as_json else
                   "\n".join(f"{r['job_id']} {r['status']}" for r in out))
    _run(ctx, body)


@main.command("make-masks")
@click.option("--coco", "coco_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def make_masks(ctx, coco_path, out_dir):
    """Render one feathered mask per COCO annotation."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        ds = datasets.parse_coco(Path(coco_path).read_bytes())
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for ann in ds.annotations:
            img = ds.image_by_id(ann["image_id"])
            spec = masks.MaskSpec(
                bbox=BBox.from_xywh(*ann["bbox"]),
                feather_px=cfg.generation.mask_feather_px,
                opacity=cfg.generation.mask_opacity)
            path = out / f"mask-{ann['id']}.png"
            masks.write_mask_with_sidecar(spec, img["width"], img["height"],
                                          path)
            written.append(str(path))
        click.echo(json.dumps(written) if as_json else "\n".join(written))
    _run(ctx, body)


@main.command("inpaint")
@click.option("--batch", "batch_path", required=True,
              type=click.Path(exists=True),
              help="JSON list of inpaint job specs.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def inpaint(ctx, batch_path, out_dir):
    """Run an inpainting batch described by a JSON spec file."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        specs = json.loads(Path(batch_path).read_text())
        jobs = []
        for spec in specs:
            jobs.append(diffusion.build_inpaint_job(
                scene_ref=spec["scene_ref"],
                scene_size=tuple(spec["scene_size"]),
                mask_ref=spec["mask_ref"],
                mask_size=tuple(spec["mask_size"]),
                class_name=spec["class_name"],
                registry=cfg.registry,
                profile=cfg.generation,
                seed=spec.get("seed", cfg.seed),
                spill_ref=spec.get("spill_ref"),
            ))
        backend = diffusion.HttpDiffusionBackend(cfg.diffusion_endpoint)
        records = diffusion.run_batch(jobs, backend, out_dir, cfg.parallelism)
        out = [{"job_id": r.job_id, "status": r.status, "attempts": r.attempts}
               for r in records]
        click.echo(json.dumps(out) if as_json else
                   "\n".join(f"{r['job_id']} {r['status']}" for r in out))
    _run(ctx, body)


@main.command("annotate-serve")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8081)
@click.option("--token", default=None)
@click.option("--ui-dir", default=None, type=click.Path())
@click.pass_context
def annotate_serve(ctx, data_dir, host, port, token, ui_dir):
    """Serve the annotation API (and static annotator UI when present)."""
    def body(as_json):
        import uvicorn

        from .annotation import (AnnotationService, ListJobQueue,
                                 create_annotation_app)
        cfg = _load_config(ctx.obj["config_path"], as_json)
        service = AnnotationService(data_dir, cfg.registry, cfg.generation,
                                    ListJobQueue())
        app = create_annotation_app(service, token=token, ui_dir=ui_dir)
        uvicorn.run(app, host=host, port=port)
    _run(ctx, body)


@main.command("monitor-serve")
@click.option("--watch-dir", required=True, type=click.Path(exists=True))
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--webhook", default=None)
@click.option("--alert-log", default=None, type=click.Path())
@click.option("--replay", "replay_path", default=None,
              type=click.Path(exists=True),
              help="Use a replay log instead of the live VLM backend.")
@click.pass_context
def monitor_serve(ctx, watch_dir, log_path, webhook, alert_log, replay_path):
    """Watch a directory for frames, detect, and dispatch alerts."""
    def body(as_json):
        import threading

        from . import monitor
        cfg = _load_config(ctx.obj["config_path"], as_json)
        detector = _frame_detector(cfg, replay_path)
        sinks: list = []
        if webhook:
            sinks.append(monitor.WebhookSink(webhook))
        if alert_log:
            sinks.append(monitor.FileSink(alert_log))
        if not sinks:
            sinks.append(monitor.FileSink(Path(log_path).with_name("alerts.jsonl")))
        policy = monitor.ThresholdPolicy(
            default_threshold=cfg.default_alert_threshold,
            per_class=dict(cfg.alert_thresholds))
        loop = monitor.MonitorLoop(
            watcher=monitor.DirectoryWatcher(watch_dir),
            detector=detector, policy=policy, sinks=sinks,
            log=monitor.DetectionLog(log_path))
        loop.start()
        click.echo("monitoring; Ctrl-C to stop", err=True)
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            loop.stop()
    _run(ctx, body)


def _frame_detector(cfg: Config, replay_path: str | None):
    """Frame-level detector over all registered classes."""
    if replay_path:
        log = vlm.ReplayLog(replay_path)
        responses = log.lookup()

        class ReplayFrameDetector:
            def detect_frame(self, image_ref):
                out = []
                for name in cfg.registry.names:
                    text = responses.get((image_ref, name))
                    if text is None:
                        continue
                    parsed = vlm.parse_response(
                        text, cfg.generation.width, cfg.generation.height,
                        cfg.coord_ceiling, default_class=name)
                    out.extend(parsed.detections)
                return out

        return ReplayFrameDetector()

    backend = vlm.HttpChatBackend(cfg.vlm_endpoint)

    class LiveFrameDetector:
        def detect_frame(self, image_ref):
            out = []
            for name in cfg.registry.names:
                parsed = vlm.detect(image_ref, name, backend,
                                    image_size=(cfg.generation.width,
                                                cfg.generation.height),
                                    ceiling=cfg.coord_ceiling,
                                    class_id=name)
                out.extend(parsed.detections)
            return out

    return LiveFrameDetector()


@main.command("detect")
@click.option("--image", "image_ref", required=True)
@click.option("--class-name", required=True)
@click.option("--width", type=float, default=1024.0)
@click.option("--height", type=float, default=1024.0)
@click.pass_context
def detect_cmd(ctx, image_ref, class_name, width, height):
    """One structured detection query against the VLM backend."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        backend = vlm.HttpChatBackend(cfg.vlm_endpoint)
        parsed = vlm.detect(image_ref, class_name, backend,
                            image_size=(width, height),
                            ceiling=cfg.coord_ceiling, class_id=class_name)
        out = {
            "parse_status": parsed.parse_status,
            "detections": json.loads(vlm.serialize_detections(parsed.detections)),
        }
        click.echo(json.dumps(out) if as_json else
                   f"{len(parsed.detections)} detections "
                   f"({parsed.parse_status})")
    _run(ctx, body)


def _split_ids(ds, split_path, split_name):
    if split_path:
        manifest = datasets.SplitManifest.from_json(Path(split_path).read_text())
        return manifest.splits[split_name]
    return [img["id"] for img in ds.images]


@main.command("evaluate")
@click.option("--coco", "coco_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", default=None, type=click.Path(exists=True))
@click.option("--results", "results_path", default=None, type=click.Path(exists=True))
@click.option("--split", "split_path", default=None, type=click.Path(exists=True))
@click.option("--split-name", default="eval")
@click.option("--tau", type=float, default=0.5)
@click.option("--method", default="method")
@click.pass_context
def evaluate_cmd(ctx, coco_path, replay_path, results_path, split_path,
                 split_name, tau, method):
    """Evaluate a replay log or an external COCO results file."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        ds = datasets.parse_coco(Path(coco_path).read_bytes())
        ids = _split_ids(ds, split_path, split_name)
        if replay_path:
            detector = evaluation.ReplayDetector(
                vlm.ReplayLog(replay_path), cfg.registry.names,
                registry=cfg.registry, ceiling=cfg.coord_ceiling)
        elif results_path:
            detector = evaluation.CocoResultsDetector(results_path)
        else:
            raise click.UsageError("provide --replay or --results")
        _, report = evaluation.run_eval(ds, ids, detector, method=method,
                                        dataset_ref=coco_path, tau=tau)
        click.echo(json.dumps(report.to_dict()) if as_json
                   else f"{report.hit_rate:.2f}")
    _run(ctx, body)


@main.command("sweep")
@click.option("--coco", "coco_path", required=True, type=click.Path(exists=True))
@click.option("--replay", "replay_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", default="0.5,0.6,0.7,0.8,0.9")
@click.option("--method", default="method")
@click.pass_context
def sweep_cmd(ctx, coco_path, replay_path, thresholds, method):
    """Hit-rate sweep over IoU thresholds from a replay log."""
    def body(as_json):
        cfg = _load_config(ctx.obj["config_path"], as_json)
        ds = datasets.parse_coco(Path(coco_path).read_bytes())
        ids = [img["id"] for img in ds.images]
        detector = evaluation.ReplayDetector(
            vlm.ReplayLog(replay_path), cfg.registry.names,
            registry=cfg.registry, ceiling=cfg.coord_ceiling)
        grid = tuple(float(t) for t in thresholds.split(","))
        _, report = evaluation.run_eval(ds, ids, detector, method=method,
                                        dataset_ref=coco_path,
                                        sweep_thresholds=grid)
        if as_json:
            click.echo(json.dumps(report.to_dict()))
        else:
            click.echo(evaluation.render_sweep_table({method: report.sweep}))
    _run(ctx, body)


@main.command("convert")
@click.option("--coco", "coco_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_context
def convert_cmd(ctx, coco_path, out_dir):
    """COCO JSON to YOLO label files, one .txt per image."""
    def body(as_json):
        ds = datasets.parse_coco(Path(coco_path).read_bytes())
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cat_ids = sorted(c["id"] for c in ds.categories)
        written = []
        for img in ds.images:
            records = [
                datasets.coco_to_yolo(a["bbox"], img["width"], img["height"],
                                      class_idx=cat_ids.index(a["category_id"]))
                for a in ds.annotations_for(img["id"])
            ]
            stem = Path(img.get("file_name", str(img["id"]))).stem
            path = out / f"{stem}.txt"
            datasets.write_yolo_file(records, path)
            written.append(str(path))
        click.echo(json.dumps(written) if as_json else "\n".join(written))
    _run(ctx, body)


@main.command("dedup")
@click.option("--dir", "image_dir", required=True, type=click.Path(exists=True))
@click.option("--max-hamming", type=int, default=8)
@click.pass_context
def dedup_cmd(ctx, image_dir, max_hamming):
    """Cluster near-duplicate images by perceptual hash."""
    def body(as_json):
        paths = {p.name: p for p in sorted(Path(image_dir).iterdir())
                 if p.is_file()}
        result = datasets.dedup(paths, max_hamming=max_hamming)
        out = {"clusters": result.clusters,
               "skipped": [list(s) for s in result.skipped]}
        click.echo(json.dumps(out) if as_json else
                   "\n".join(" ".join(c) for c in result.clusters))
    _run(ctx, body)


@main.command("split")
@click.option("--coco", "coco_path", required=True, type=click.Path(exists=True))
@click.option("--counts", required=True,
              help='JSON object, e.g. {"eval": 520, "adapt": 100}.')
@click.option("--seed", type=int, default=0)
@click.option("--source", default="public")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def split_cmd(ctx, coco_path, counts, seed, source, out_path):
    """Deterministic disjoint splits written as a JSON manifest."""
    def body(as_json):
        ds = datasets.parse_coco(Path(coco_path).read_bytes())
        manifest = datasets.make_splits(ds, json.loads(counts), seed,
                                        source=source)
        Path(out_path).write_text(manifest.to_json())
        click.echo(json.dumps({name: len(ids) for name, ids
                               in manifest.splits.items()})
                   if as_json else out_path)
    _run(ctx, body)


@main.command("merge-lora")
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--adapter", "adapter_path", required=True,
              type=click.Path(exists=True))
@click.option("--variant", type=click.Choice(["L", "V", "V+L"]),
              default="V+L")
@click.option("--alpha", type=float, default=None,
              help="Override the default 1/rank scaling.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
def merge_lora(ctx, base_path, adapter_path, variant, alpha, out_path):
    """Merge low-rank adapters into a tensor container."""
    def body(as_json):
        base = lora.read_store(Path(base_path).read_bytes())
        adapters = lora.adapters_from_store(
            lora.read_store(Path(adapter_path).read_bytes()), alpha=alpha)
        merged = lora.merge_store(base, adapters, variant=variant)
        Path(out_path).write_bytes(lora.write_store(merged))
        info = {"targets": sorted(adapters), "variant": variant,
                "out": out_path}
        click.echo(json.dumps(info) if as_json else out_path)
    _run(ctx, body)


@main.command("render-report")
@click.option("--values", "values_path", required=True,
              type=click.Path(exists=True),
              help="JSON list of {method, column, hit_rate, tau} cells.")
@click.option("--format", "fmt", type=click.Choice(["markdown", "csv", "json"]),
              default="markdown")
@click.pass_context
def render_report_cmd(ctx, values_path, fmt):
    """Render a hit-rate table from report cells."""
    def body(as_json):
        cells = json.loads(Path(values_path).read_text())
        reports = [evaluation.EvalReport(
            method=c["method"], column=c.get("column", ""),
            tau=c.get("tau", 0.5), hit_rate=c["hit_rate"]) for c in cells]
        click.echo(evaluation.render_report(reports, fmt))
    _run(ctx, body)


if __name__ == "__main__":
    main()
