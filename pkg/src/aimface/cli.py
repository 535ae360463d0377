"""Command-line pipeline: generate synthetic data, extract constraints,
train, fit, retarget, edit, export, and serve.

Every command echoes its effective configuration as a single JSON line on
stdout, so a run is replayable from its own output. Values come from, in
rising precedence: built-in defaults, a ``--config`` JSON file, explicit
flags. Error tables are printed human-readable and written as CSV. The
``AIM_THREADS`` environment variable caps numerical thread pools.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import click
import numpy as np

from . import fitting as fit_mod
from . import model as model_mod
from . import synth as synth_mod
from .constraints import compute_constraints, load_constraints, save_constraints
from .geometry import SymmetryPlane, TriMesh, load_mesh, save_mesh

MANIFEST_NAME = "project.json"
MANIFEST_KIND = "aimface-project"
MANIFEST_VERSION = 1


def _apply_thread_cap() -> None:
    raw = os.environ.get("AIM_THREADS", "").strip()
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise click.ClickException(f"AIM_THREADS must be an integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except Exception:
        pass  # env vars above still apply to pools not yet started


@click.group()
@click.version_option(package_name="aimface")
def main() -> None:
    """Anatomical implicit face models: data, training, fitting, serving."""
    _apply_thread_cap()


def _echo_config(command: str, payload: dict) -> None:
    click.echo(json.dumps({"command": command, **payload}, sort_keys=True))


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------- manifest

def load_manifest(path: str | Path) -> tuple[dict, Path]:
    """Read and validate a project manifest; returns (manifest, project root)."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise click.ClickException(f"no manifest at {p}")
    data = json.loads(p.read_text())
    if data.get("kind") != MANIFEST_KIND:
        raise click.ClickException(f"{p}: not a project manifest")
    if data.get("version") != MANIFEST_VERSION:
        raise click.ClickException(
            f"{p}: manifest version {data.get('version')} unsupported "
            f"(expected {MANIFEST_VERSION})")
    root = p.parent
    missing = []
    refs = [data.get("template"), data.get("skull"), data.get("mandible"),
            data.get("masks"), data.get("constraints"), data.get("checkpoint"),
            *(data.get("blendshapes") or [])]
    for ref in refs:
        if ref is not None and not (root / ref).exists():
            missing.append(ref)
    if missing:
        raise click.ClickException(
            f"{p}: referenced files missing: {', '.join(missing)}")
    return data, root


def _load_masks(path: Path) -> tuple[np.ndarray, np.ndarray, SymmetryPlane]:
    doc = json.loads(path.read_text())
    if doc.get("kind") != "aimface-masks":
        raise click.ClickException(f"{path}: not a masks file")
    plane = SymmetryPlane(normal=np.asarray(doc["symmetry_plane"]["normal"]),
                          offset=float(doc["symmetry_plane"]["offset"]))
    return (np.asarray(doc["trusted"], dtype=np.int64),
            np.asarray(doc["forehead"], dtype=np.int64), plane)


# ------------------------------------------------------------------- synth

@main.command("synth")
@click.option("--seed", type=int, required=True, help="generator seed")
@click.option("--shapes", type=int, default=10, show_default=True,
              help="number of blendshapes, neutral included (>= 2)")
@click.option("--verts", type=int, default=2000, show_default=True,
              help="approximate vertex budget")
@click.option("--asymmetry", type=float, default=0.0, show_default=True,
              help="mm of symmetry-breaking noise")
@click.option("--performance-frames", type=int, default=0, show_default=True,
              help="also emit a dense 3D target sequence of this many frames")
@click.option("--performance-seed", type=int, default=None,
              help="seed for the target sequence (default: seed + 1)")
@click.argument("out_dir", type=click.Path(file_okay=False))
def cmd_synth(seed, shapes, verts, asymmetry, performance_frames,
              performance_seed, out_dir):
    """Generate a synthetic-actor project: blendshape OBJs, bone meshes,
    masks, anatomy constraints, and a manifest."""
    try:
        actor = synth_mod.gen_actor(
            seed, synth_mod.GenConfig(verts=verts, shapes=shapes,
                                      asymmetry=asymmetry))
    except ValueError as e:
        raise click.ClickException(str(e))
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    shape_names = []
    for i in range(actor.n_shapes):
        name = f"shape_{i:03d}.obj"
        save_mesh(TriMesh(vertices=actor.blendshapes[i],
                          faces=actor.skin.faces), root / name)
        shape_names.append(name)
    save_mesh(actor.skull, root / "skull.obj")
    save_mesh(actor.mandible, root / "mandible.obj")

    _write_json(root / "masks.json", {
        "kind": "aimface-masks",
        "trusted": np.nonzero(actor.trusted_mask)[0].tolist(),
        "forehead": np.nonzero(actor.forehead_mask)[0].tolist(),
        "symmetry_plane": {
            "normal": np.asarray(actor.symmetry_plane.normal).tolist(),
            "offset": float(actor.symmetry_plane.offset)},
    })
    cons = compute_constraints(actor.skin, [actor.skull, actor.mandible],
                               actor.trusted_mask)
    save_constraints(cons, root / "constraints.json")

    targets_name = None
    if performance_frames > 0:
        pseed = seed + 1 if performance_seed is None else performance_seed
        perf = synth_mod.gen_performance(actor, pseed, performance_frames)
        idx = np.arange(actor.n_vertices)
        frames = [fit_mod.FrameTarget(mode="3d", indices=idx,
                                      targets=perf.vertices[j])
                  for j in range(perf.n_frames)]
        targets_name = "perf_targets.json"
        fit_mod.save_targets(root / targets_name, frames)
        _write_json(root / "perf_truth.json", {
            "kind": "aimface-performance-truth",
            "seed": pseed,
            "head_poses": perf.head_poses.tolist(),
            "jaw_poses": perf.jaw_poses.tolist(),
            "coeffs": perf.coeffs.tolist(),
            "jaw_angles_deg": perf.jaw_angles_deg.tolist(),
        })

    config = {"seed": seed, "shapes": shapes, "verts": verts,
              "asymmetry": asymmetry,
              "performance_frames": performance_frames,
              "performance_seed": performance_seed}
    manifest = {
        "kind": MANIFEST_KIND, "version": MANIFEST_VERSION,
        "generator": config,
        "template": shape_names[0],
        "blendshapes": shape_names,
        "skull": "skull.obj", "mandible": "mandible.obj",
        "masks": "masks.json", "constraints": "constraints.json",
        "targets": targets_name,
        "checkpoint": None,
    }
    _write_json(root / MANIFEST_NAME, manifest)
    _echo_config("synth", {"config": config, "out_dir": str(root),
                           "n_vertices": int(actor.n_vertices),
                           "constraint_coverage": round(cons.coverage, 6)})


# -------------------------------------------------------------- constraints

@main.command("constraints")
@click.argument("project", type=click.Path(exists=True))
@click.option("--out", "out_name", default="constraints.json",
              show_default=True, help="output file name inside the project")
def cmd_constraints(project, out_name):
    """Re-extract anatomy constraints (bidirectional skin/bone casting)
    from a project's meshes and trusted mask."""
    manifest, root = load_manifest(project)
    neutral = load_mesh(root / manifest["template"])
    skull = load_mesh(root / manifest["skull"])
    skull.name = "skull"
    mandible = load_mesh(root / manifest["mandible"])
    mandible.name = "mandible"
    trusted, _, _ = _load_masks(root / manifest["masks"])
    cons = compute_constraints(neutral, [skull, mandible], trusted)
    save_constraints(cons, root / out_name)
    if manifest.get("constraints") != out_name:
        manifest["constraints"] = out_name
        _write_json(root / MANIFEST_NAME, manifest)
    _echo_config("constraints", {
        "project": str(root), "out": out_name,
        "n_constraints": len(cons.entries),
        "coverage": round(cons.coverage, 6)})


# ------------------------------------------------------------------- train

_LOSS_GROUPS = {
    "anatomy": "anatomy", "la": "anatomy",
    "symmetry": "symmetry", "lsym": "symmetry",
    "thickness-reg": "thickness-reg", "ldreg": "thickness-reg",
    "attach-reg": "attach-reg", "lk": "attach-reg",
}

_TRAIN_FLAGS = [
    ("iterations", int, "optimizer iterations"),
    ("learning_rate", float, "peak Adam learning rate"),
    ("lr_schedule", click.Choice(["cosine", "constant"]), "rate schedule"),
    ("hidden_dim", int, "hidden width of every net"),
    ("depth", int, "hidden layers per net"),
    ("activation", click.Choice(["sine", "relu", "gelu"]), "activation"),
    ("omega0", float, "sine frequency scale"),
    ("batch_size", int, "vertices per iteration (0 = all)"),
    ("symmetry_samples", int, "symmetry-term subsample (0 = whole batch)"),
    ("seed", int, "training seed"),
    ("log_every", int, "loss log interval"),
    ("weight_shape", float, "shape reproduction weight"),
    ("weight_bone", float, "bone-point constraint weight"),
    ("weight_thickness", float, "thickness constraint weight"),
    ("weight_direction", float, "direction constraint weight"),
    ("weight_thickness_reg", float, "thickness magnitude penalty"),
    ("weight_symmetry", float, "bone symmetry weight"),
    ("weight_attach_reg", float, "forehead attachment weight"),
]


def _config_from_sources(ctx, config_cls, config_path, flag_names):
    """defaults < --config file < explicit flags."""
    values = {}
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        known = {f.name for f in fields(config_cls)}
        unknown = set(doc) - known
        if unknown:
            raise click.ClickException(
                f"{config_path}: unknown config keys: {', '.join(sorted(unknown))}")
        values.update(doc)
    from click.core import ParameterSource
    for name in flag_names:
        if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE:
            values[name] = ctx.params[name]
    try:
        return config_cls(**values)
    except (TypeError, ValueError) as e:
        raise click.ClickException(f"bad configuration: {e}")


def _train_options(fn):
    for name, kind, helptext in reversed(_TRAIN_FLAGS):
        flag = "--" + name.replace("_", "-")
        fn = click.option(flag, name, type=kind, default=None,
                          help=helptext)(fn)
    return fn


@main.command("train")
@click.argument("project", type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="checkpoint path (default <project>/model.json)")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON file of TrainConfig fields")
@click.option("--no-loss", "no_loss", multiple=True,
              type=click.Choice(sorted(_LOSS_GROUPS), case_sensitive=False),
              help="disable a loss group (ablations); repeatable")
@_train_options
@click.pass_context
def cmd_train(ctx, project, out_path, config_path, no_loss, **_flags):
    """Train the five coordinate nets and jaw transforms on a project's
    blendshapes; writes a checkpoint and a per-term loss CSV."""
    manifest, root = load_manifest(project)
    cfg = _config_from_sources(ctx, model_mod.TrainConfig, config_path,
                               [n for n, _, _ in _TRAIN_FLAGS])
    for tag in no_loss:
        group = _LOSS_GROUPS[tag.lower()]
        if group == "anatomy":
            cfg.use_anatomy_losses = False
            cfg.weight_bone = cfg.weight_thickness = cfg.weight_direction = 0.0
        elif group == "symmetry":
            cfg.use_symmetry_loss = False
            cfg.weight_symmetry = 0.0
        elif group == "thickness-reg":
            cfg.use_thickness_reg = False
            cfg.weight_thickness_reg = 0.0
        elif group == "attach-reg":
            cfg.use_attach_reg = False
            cfg.weight_attach_reg = 0.0

    template = load_mesh(root / manifest["template"])
    blendshapes = [load_mesh(root / name) for name in manifest["blendshapes"]]
    constraints = (load_constraints(root / manifest["constraints"])
                   if manifest.get("constraints") else None)
    forehead = plane = None
    if manifest.get("masks"):
        _, forehead, plane = _load_masks(root / manifest["masks"])

    out = Path(out_path) if out_path else root / "model.json"
    log_csv = out.with_name(out.stem + "_losses.csv")
    try:
        model = model_mod.train(blendshapes, template, constraints=constraints,
                                forehead_mask=forehead, symmetry_plane=plane,
                                config=cfg, log_path=log_csv)
    except ValueError as e:
        raise click.ClickException(str(e))
    model_mod.save_model(model, out)

    try:
        rel = out.relative_to(root)
        manifest["checkpoint"] = str(rel)
    except ValueError:
        manifest["checkpoint"] = str(out.resolve())
    _write_json(root / MANIFEST_NAME, manifest)

    report = model_mod.reconstruction_errors(model, blendshapes)
    _echo_config("train", {
        "config": asdict(cfg), "checkpoint": str(out), "loss_csv": str(log_csv),
        "final_losses": model.final_losses,
        "reconstruction": {"mean_mm": report["mean"],
                           "relative_mean": report["relative_mean"]}})


# --------------------------------------------------------------------- fit

_FIT_FLAGS = [
    ("iterations", int, "optimizer iterations"),
    ("learning_rate", float, "Adam learning rate"),
    ("code_dim", int, "per-frame code size"),
    ("hidden_dim", int, "decoder net width"),
    ("depth", int, "decoder hidden layers"),
    ("seed", int, "net init seed"),
    ("log_every", int, "loss log interval"),
    ("weight_3d", float, "3D data weight (exactly one of 3d/2d nonzero)"),
    ("weight_2d", float, "2D data weight"),
    ("weight_coeff", float, "coefficient magnitude weight"),
    ("weight_temporal", float, "code smoothness weight"),
]


def _fit_options(fn):
    for name, kind, helptext in reversed(_FIT_FLAGS):
        flag = "--" + name.replace("_", "-")
        fn = click.option(flag, name, type=kind, default=None,
                          help=helptext)(fn)
    return fn


def _error_table(unit: str, errors: list[dict]) -> str:
    lines = [f"frame  mean_{unit}  max_{unit}"]
    for j, e in enumerate(errors):
        lines.append(f"{j:5d}  {e['mean']:9.4f}  {e['max']:8.4f}")
    return "\n".join(lines)


def _write_error_csv(path: Path, unit: str, errors: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", f"mean_{unit}", f"max_{unit}"])
        for j, e in enumerate(errors):
            writer.writerow([j, repr(e["mean"]), repr(e["max"])])


@main.command("fit")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True), help="trained checkpoint")
@click.option("--targets", "targets_path", required=True,
              type=click.Path(exists=True), help="targets JSON file")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False), help="output directory")
@click.option("--mode", type=click.Choice(["3d", "2d"]), default=None,
              help="expected target mode; must match the targets file")
@click.option("--sparse", is_flag=True,
              help="landmark fitting (requires >= 9 points per frame)")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON file of FitConfig fields")
@_fit_options
@click.pass_context
def cmd_fit(ctx, model_path, targets_path, out_dir, mode, sparse,
            config_path, **_flags):
    """Fit per-frame codes and decoder nets to a target sequence; writes the
    fit container, a loss CSV, and a per-frame error table."""
    model = model_mod.load_model(model_path)
    frames = fit_mod.load_targets(targets_path)
    file_mode = frames[0].mode if frames else None
    if mode is not None and file_mode is not None and mode != file_mode:
        raise click.ClickException(
            f"targets file holds {file_mode} targets but --mode {mode} "
            f"was requested; refusing the mixed configuration")
    from click.core import ParameterSource
    explicit = {n for n, _, _ in _FIT_FLAGS
                if ctx.get_parameter_source(n) == ParameterSource.COMMANDLINE}
    cfg = _config_from_sources(ctx, fit_mod.FitConfig, config_path,
                               [n for n, _, _ in _FIT_FLAGS])
    active_mode = mode or file_mode
    if active_mode == "2d" and not {"weight_3d", "weight_2d"} & explicit:
        cfg.weight_3d, cfg.weight_2d = 0.0, 1.0

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    solver = fit_mod.fit_sparse if sparse else fit_mod.fit_sequence
    try:
        result = solver(model, frames, cfg, log_path=out / "fit_log.csv")
    except ValueError as e:
        raise click.ClickException(str(e))
    fit_mod.save_fit(result, out / "fit.json")

    unit = "mm" if result.mode == "3d" else "px"
    click.echo(_error_table(unit, result.per_frame_errors))
    _write_error_csv(out / "fit_errors.csv", unit, result.per_frame_errors)
    _echo_config("fit", {
        "config": asdict(cfg), "mode": result.mode, "sparse": bool(sparse),
        "model": str(model_path), "targets": str(targets_path),
        "fit": str(out / "fit.json"), "errors_csv": str(out / "fit_errors.csv"),
        "mean_error": float(np.mean([e["mean"]
                                     for e in result.per_frame_errors]))})


# ---------------------------------------------------------------- retarget

@main.command("retarget")
@click.option("--source", "source_path", required=True,
              type=click.Path(exists=True), help="fit container to play back")
@click.option("--target", "target_path", required=True,
              type=click.Path(exists=True), help="checkpoint to drive")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
def cmd_retarget(source_path, target_path, out_dir):
    """Play a fitted performance back on another model of the same shape
    count; writes full, jaw-only, and expression-only OBJs per frame."""
    fit = fit_mod.load_fit(source_path)
    target = model_mod.load_model(target_path)
    try:
        frames = fit_mod.retarget(fit, target)
    except ValueError as e:
        raise click.ClickException(str(e))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for j, frame in enumerate(frames):
        for suffix, mesh in (("", frame.full), ("_jaw_only", frame.jaw_only),
                             ("_expression_only", frame.expression_only)):
            name = f"frame_{j:04d}{suffix}.obj"
            save_mesh(mesh, out / name)
            files.append(name)
    _write_json(out / "retarget.json", {
        "kind": "aimface-retarget", "source": str(source_path),
        "target": str(target_path), "n_frames": len(frames), "files": files})
    _echo_config("retarget", {"source": str(source_path),
                              "target": str(target_path),
                              "out_dir": str(out), "n_frames": len(frames)})


# -------------------------------------------------------------------- edit

def _load_mask_file(path: Path) -> np.ndarray:
    doc = json.loads(path.read_text())
    if isinstance(doc, dict):
        doc = doc.get("indices")
    if not isinstance(doc, list):
        raise click.ClickException(
            f"{path}: mask must be a JSON list of vertex indices "
            f"or an object with an 'indices' list")
    return np.asarray(doc, dtype=np.int64)


@main.command("edit")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True,
              type=click.Path(exists=True),
              help="JSON vertex-index mask to rescale")
@click.option("--scale", type=float, required=True,
              help="absolute soft-tissue thickness factor (>= 0)")
@click.option("--shape-index", type=int, default=0, show_default=True,
              help="pose preset: evaluate under this blendshape's pose")
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_edit(model_path, mask_path, scale, shape_index, out_path):
    """Rescale soft-tissue thickness over a masked region and write the
    rebuilt surface as OBJ."""
    model = model_mod.load_model(model_path)
    mask = _load_mask_file(Path(mask_path))
    coeffs = jaw = None
    if shape_index != 0:
        if not 0 < shape_index < model.n_shapes:
            raise click.ClickException(
                f"shape index {shape_index} out of range [0, {model.n_shapes})")
        coeffs = np.zeros(model.n_shapes - 1)
        coeffs[shape_index - 1] = 1.0
        jaw = model.jaw_transforms[shape_index - 1]
    try:
        mesh = model_mod.manipulate_thickness(model, mask, scale,
                                              coeffs=coeffs, jaw_transform=jaw)
    except (ValueError, IndexError) as e:
        raise click.ClickException(str(e))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, out)
    _echo_config("edit", {"model": str(model_path), "mask": str(mask_path),
                          "scale": scale, "shape_index": shape_index,
                          "out": str(out), "n_masked": int(len(mask))})


# ------------------------------------------------------------------ export

@main.command("export")
@click.option("--fit", "fit_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False))
@click.option("--stem", default="fit", show_default=True)
def cmd_export(fit_path, model_path, out_dir, stem):
    """Export a fit: container, manifest, and the played-back OBJ sequence."""
    fit = fit_mod.load_fit(fit_path)
    model = model_mod.load_model(model_path)
    try:
        manifest = fit_mod.export_fit(fit, model, out_dir, stem=stem)
    except ValueError as e:
        raise click.ClickException(str(e))
    unit = "mm" if fit.mode == "3d" else "px"
    click.echo(_error_table(unit, fit.per_frame_errors))
    _echo_config("export", {"fit": str(fit_path), "model": str(model_path),
                            "out_dir": str(out_dir), "stem": stem,
                            "n_frames": manifest["n_frames"]})


# ------------------------------------------------------------------- serve

@main.command("serve")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def cmd_serve(model_path, host, port):
    """Serve the interactive-editor HTTP API for a trained checkpoint."""
    import uvicorn

    from .service import create_app
    _echo_config("serve", {"model": str(model_path), "host": host,
                           "port": port})
    uvicorn.run(create_app(model_path=model_path), host=host, port=port)


if __name__ == "__main__":
    main()
