"""Thin command-line client for the pipeline service.

Each subcommand maps onto one service endpoint. Without ``--server`` the
FastAPI app runs in-process over an ASGI transport, so every command works
offline with identical behavior; with ``--server URL`` the same requests go
to a remote instance.
"""

from __future__ import annotations

import asyncio
import json
import sys

import click
import httpx

from .config import config_keys

_OVERRIDE_EPILOG = "\b\nConfig override keys (--set key=value):\n" + "\n".join(
    f"  {key}" for key in config_keys()
)


def _call(server: str | None, path: str, payload: dict) -> dict:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            response = client.post(path, json=payload)
    else:
        from .service.app import create_app

        async def go():
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(
                transport=transport, base_url="http://ctmix.local", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        response = asyncio.run(go())
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return response.json()


def _common_payload(config, set_, seed, workers):
    payload = {"config": config, "set": list(set_)}
    if seed is not None:
        payload["seed"] = seed
    if workers is not None:
        payload["workers"] = workers
    return payload


def common_options(fn):
    fn = click.option("--config", type=click.Path(), default=None, help="YAML run config path.")(fn)
    fn = click.option("--set", "set_", multiple=True, metavar="KEY=VALUE",
                      help="Override a config key (repeatable).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override train.seed.")(fn)
    fn = click.option("--workers", type=int, default=None, help="Override train.workers.")(fn)
    return fn


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Remote service URL; defaults to an in-process service.")
@click.pass_context
def main(ctx, server):
    """Volumetric CT classification pipeline: data, training, evaluation, CAM."""
    ctx.obj = server


@main.command("synth-data", epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--out-dir", required=True, type=click.Path(), help="Dataset output directory.")
@click.option("--force", is_flag=True, help="Overwrite a non-empty output directory.")
@click.pass_obj
def synth_data(server, config, set_, seed, workers, out_dir, force):
    """Write a synthetic phantom dataset with labels and a split manifest."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"out_dir": out_dir, "force": force})
    body = _call(server, "/datasets/synthesize", payload)
    click.echo(
        f"wrote {body['n_scans']} scans ({body['n_positive']} positive) to {body['out_dir']} "
        f"[config {body['config_hash']}]"
    )


@main.command(epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--data-root", type=click.Path(), default=None,
              help="Dataset root (defaults to $CMC_DATA_ROOT or data.root).")
@click.option("--out-dir", required=True, type=click.Path(), help="Run output directory.")
@click.option("--resume", is_flag=True, help="Continue from the last epoch checkpoint.")
@click.option("--stop-after", type=int, default=None, help="Cap epochs run this session.")
@click.pass_obj
def train(server, config, set_, seed, workers, data_root, out_dir, resume, stop_after):
    """Train a model; keeps best/last checkpoints and a metric history CSV."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"data_root": data_root, "out_dir": out_dir,
                    "resume": resume, "stop_after": stop_after})
    body = _call(server, "/train", payload)
    last = body["history"][-1] if body["history"] else {}
    click.echo(
        f"trained {body['epochs_run']} epoch(s); best val macro F1 "
        f"{body['best_val_macro_f1']:.4f}; last epoch {json.dumps(last)}"
    )
    click.echo(f"best checkpoint: {body['best_checkpoint']} [config {body['config_hash']}]")


@main.command(name="eval", epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--checkpoint", required=True, type=click.Path(), help="Checkpoint to evaluate.")
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--split", default="val", show_default=True, help="Manifest split to score.")
@click.option("--tta", type=int, default=0, show_default=True,
              help="Stochastic TTA views (0 disables TTA).")
@click.option("--out-dir", type=click.Path(), default=None, help="Write report files here.")
@click.pass_obj
def eval_cmd(server, config, set_, seed, workers, checkpoint, data_root, split, tta, out_dir):
    """Evaluate a checkpoint: per-class F1, macro F1, ROC/AUC, confusion."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"checkpoint": checkpoint, "data_root": data_root,
                    "split": split, "tta": tta, "out_dir": out_dir})
    body = _call(server, "/evaluate", payload)
    click.echo(
        f"macro F1 {body['macro_f1']:.4f} | per-class {body['f1_per_class']} | "
        f"AUC {body['auc_per_class']} | n={body['n_samples']} [config {body['config_hash']}]"
    )
    for name, path in body.get("files", {}).items():
        click.echo(f"  {name}: {path}")


@main.command(epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--split", default=None, help="Score a manifest split ...")
@click.option("--scan-id", "scan_ids", multiple=True, help="... or specific scans (repeatable).")
@click.option("--tta", type=int, default=0, show_default=True)
@click.option("--out-csv", type=click.Path(), default=None, help="Write probabilities CSV here.")
@click.pass_obj
def predict(server, config, set_, seed, workers, checkpoint, data_root, split, scan_ids, tta, out_csv):
    """Per-scan class probabilities for a split or named scans."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"checkpoint": checkpoint, "data_root": data_root, "split": split,
                    "scan_ids": list(scan_ids), "tta": tta, "out_csv": out_csv})
    body = _call(server, "/predict", payload)
    for row in body["rows"]:
        click.echo(f"{row['scan_id']},{row['p_class0']:.6f},{row['p_class1']:.6f}")
    if body.get("csv_path"):
        click.echo(f"csv: {body['csv_path']} [config {body['config_hash']}]")


@main.command(epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--scan-id", "scan_ids", multiple=True, help="Scans to render (default: val split).")
@click.option("--target-class", type=int, default=1, show_default=True)
@click.option("--limit", type=int, default=None, help="Cap the number of scans rendered.")
@click.option("--out-dir", required=True, type=click.Path(), help="Overlay output directory.")
@click.pass_obj
def cam(server, config, set_, seed, workers, checkpoint, data_root, scan_ids, target_class, limit, out_dir):
    """Render class-activation heatmap overlays per slice."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"checkpoint": checkpoint, "data_root": data_root,
                    "scan_ids": list(scan_ids), "target_class": target_class,
                    "limit": limit, "out_dir": out_dir})
    body = _call(server, "/cam", payload)
    total = sum(len(v) for v in body["overlays"].values())
    click.echo(
        f"wrote {total} overlay images for {len(body['overlays'])} scan(s) to {out_dir} "
        f"[config {body['config_hash']}]"
    )


@main.command("ensemble-eval", epilog=_OVERRIDE_EPILOG)
@common_options
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              help="Checkpoint path (repeat for each ensemble member).")
@click.option("--data-root", type=click.Path(), default=None)
@click.option("--split", default="val", show_default=True)
@click.option("--tta", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), default=None)
@click.pass_obj
def ensemble_eval(server, config, set_, seed, workers, checkpoints, data_root, split, tta, out_dir):
    """Evaluate the unweighted probability average of several checkpoints."""
    payload = _common_payload(config, set_, seed, workers)
    payload.update({"checkpoints": list(checkpoints), "data_root": data_root,
                    "split": split, "tta": tta, "out_dir": out_dir})
    body = _call(server, "/evaluate/ensemble", payload)
    click.echo(
        f"ensemble of {len(checkpoints)}: macro F1 {body['macro_f1']:.4f} | "
        f"per-class {body['f1_per_class']} | AUC {body['auc_per_class']} "
        f"[config {body['config_hash']}]"
    )


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
