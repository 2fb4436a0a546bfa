"""On-disk dataset layout with lossless round-trip.

    <root>/manifest.json            format version, scene config, count, checksums
    <root>/<idx>/scene.json         exact shape parameters and depth order
    <root>/<idx>/image.png          8-bit grayscale, canvas_size^2
    <root>/<idx>/fg_class.png       16-bit grayscale label maps, label_size^2
    <root>/<idx>/occ_class.png      (0 = background/none, v > 0 = id v-1)
    <root>/<idx>/fg_instance.png
    <root>/<idx>/occ_instance.png

Amodal masks and occlusion fractions are not stored: they are recomputed
exactly from scene.json on read (scene floats survive JSON round-trip
bit-for-bit). Checksums cover the raw pixels of the four label maps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .scenegen import (
    DatasetSample,
    RenderedSample,
    Scene,
    SceneConfig,
    ShapeInstance,
    rasterize_scene,
)

FORMAT_VERSION = 1
_LABEL_MAPS = ("fg_class", "occ_class", "fg_instance", "occ_instance")


class DatasetFormatError(RuntimeError):
    pass


def _label_checksum(rendered: RenderedSample) -> str:
    h = hashlib.sha256()
    for name in _LABEL_MAPS:
        h.update(getattr(rendered, name).astype("<u2").tobytes())
    return h.hexdigest()


def scene_to_dict(scene: Scene) -> dict:
    return {"instances": [asdict(inst) for inst in scene.instances]}


def scene_from_dict(obj: dict) -> Scene:
    instances = tuple(
        ShapeInstance(
            instance_id=int(d["instance_id"]),
            class_id=int(d["class_id"]),
            center=(float(d["center"][0]), float(d["center"][1])),
            orientation=float(d["orientation"]),
            depth_rank=int(d["depth_rank"]),
        )
        for d in obj["instances"]
    )
    return Scene(instances=instances)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_dataset(samples: list[DatasetSample], config: SceneConfig, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, sample in enumerate(samples):
        sdir = root / str(idx)
        sdir.mkdir(exist_ok=True)
        _dump_json(scene_to_dict(sample.scene), sdir / "scene.json")
        rendered = sample.rendered
        if rendered.image is None:
            raise ValueError(f"sample {idx} has no image; rasterize with render_image=True")
        Image.fromarray(rendered.image).save(sdir / "image.png")
        for name in _LABEL_MAPS:
            Image.fromarray(getattr(rendered, name).astype(np.uint16)).save(
                sdir / f"{name}.png"
            )
        entries.append({"index": idx, "label_checksum": _label_checksum(rendered)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "scene_config": asdict(config),
        "num_samples": len(samples),
        "samples": entries,
    }
    _dump_json(manifest, root / "manifest.json")


def _load_label_map(path: Path, sample_name: str) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except Exception as exc:
        raise DatasetFormatError(f"sample {sample_name}: cannot read {path.name}: {exc}") from exc
    return arr.astype(np.uint16)


def read_dataset(root) -> tuple[SceneConfig, list[DatasetSample]]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"no manifest.json under {root}")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format version {version!r} (expected {FORMAT_VERSION})"
        )
    cfg_dict = dict(manifest["scene_config"])
    cfg_dict["classes"] = tuple(cfg_dict["classes"])
    config = SceneConfig(**cfg_dict)

    samples = []
    for entry in manifest["samples"]:
        idx = entry["index"]
        sdir = root / str(idx)
        scene = scene_from_dict(json.loads((sdir / "scene.json").read_text()))
        try:
            image = np.asarray(Image.open(sdir / "image.png")).astype(np.uint8)
        except Exception as exc:
            raise DatasetFormatError(f"sample {idx}: cannot read image.png: {exc}") from exc
        maps = {name: _load_label_map(sdir / f"{name}.png", str(idx)) for name in _LABEL_MAPS}

        # amodal masks and occlusion fractions are a pure function of the scene
        recomputed = rasterize_scene(scene, config, render_image=False)
        rendered = RenderedSample(
            image=image,
            fg_class=maps["fg_class"],
            occ_class=maps["occ_class"],
            fg_instance=maps["fg_instance"],
            occ_instance=maps["occ_instance"],
            amodal_masks=recomputed.amodal_masks,
            occlusion_fraction=recomputed.occlusion_fraction,
        )
        checksum = _label_checksum(rendered)
        if checksum != entry["label_checksum"]:
            raise DatasetFormatError(f"sample {idx}: label map checksum mismatch")
        samples.append(DatasetSample(scene=scene, rendered=rendered))
    return config, samples


def manifest_hash(root) -> str:
    """SHA-256 of the manifest file bytes (stable across identical runs)."""
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()
