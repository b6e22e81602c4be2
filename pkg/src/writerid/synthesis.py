"""Synthetic two-writer workspaces for demos and end-to-end tests.

Real document photographs are usually rights-restricted, so this module
fabricates a workspace with the same shape: source images containing
two-line "sentence" regions, an annotation file, and a held-out external
region file.  Each candidate writer is a horizontal-stripe hand: the first
writer's stripes are bright-on-top (positive grating sign), the second's
are inverted, which survives every augmentation.  Sibling classes within
one hand differ only in stripe contrast, and a per-piece drift toward the
sibling contrast plus pixel noise manufactures realistic within-author
confusion while cross-author confusion stays near zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import canonical_author_map
from .imgio import save_gray


@dataclass(frozen=True)
class SynthConfig:
    scheme_id: str = "macro4"
    n_classes: int = 4
    pieces_per_class: int = 8
    piece_width: int = 124
    piece_height: int = 44
    margin: int = 14
    base_level: float = 128.0
    stripe_period: float = 16.0
    amplitudes4: tuple[float, float] = (34.0, 62.0)
    amplitudes8: tuple[float, float, float, float] = (18.0, 44.0, 84.0, 110.0)
    noise_sigma: float = 17.0
    mix_max: float = 0.20
    rotate_every: int = 3  # every k-th piece gets a slightly rotated quad
    rotation_deg: float = 2.5
    master_seed: int = 20220906


def _hand_of(class_label: int, n_classes: int) -> int:
    """0 for the first writer's classes, 1 for the second's."""
    return 0 if class_label <= n_classes // 2 else 1


def _amplitude_of(class_label: int, cfg: SynthConfig) -> float:
    half = cfg.n_classes // 2
    within = (class_label - 1) % half
    amplitudes = cfg.amplitudes4 if cfg.n_classes == 4 else cfg.amplitudes8
    return amplitudes[within]


def _sibling(class_label: int, cfg: SynthConfig) -> int:
    """The same-hand neighbor class (1<->2, 3<->4, ...)."""
    half = cfg.n_classes // 2
    within = (class_label - 1) % half
    return class_label - within + (within ^ 1)


def texture_field(
    xs: np.ndarray, ys: np.ndarray, class_label: int, mix: float, cfg: SynthConfig
) -> np.ndarray:
    """Stripe value (float, around base_level) at piece-local coordinates.

    Stripes vary along y only, so tiling offsets (which move along x on
    two-line pieces) never change a tile's phase; zoom is anchored at the
    piece center and cannot flip the hand sign.
    """
    sign = 1.0 if _hand_of(class_label, cfg.n_classes) == 0 else -1.0
    own = _amplitude_of(class_label, cfg)
    sib = _amplitude_of(_sibling(class_label, cfg), cfg)
    amplitude = (1.0 - mix) * own + mix * sib
    del xs  # stripes are a function of y alone
    return cfg.base_level + sign * amplitude * np.cos(2.0 * np.pi * ys / cfg.stripe_period)


def render_piece_cell(
    cell: np.ndarray,
    piece_origin: tuple[float, float],
    angle_rad: float,
    class_label: int,
    mix: float,
    rng: np.random.Generator,
    cfg: SynthConfig,
) -> None:
    """Paint one cell with the piece's texture, rotated by angle_rad.

    The texture is evaluated in piece-local coordinates obtained by the
    inverse rotation about the piece center, so a quad annotated at the
    same angle recovers the upright texture after de-rotation.  The
    texture fills the whole cell; the quad decides what gets extracted.
    """
    h, w = cell.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cx = piece_origin[0] + cfg.piece_width / 2.0
    cy = piece_origin[1] + cfg.piece_height / 2.0
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    cos_a, sin_a = np.cos(-angle_rad), np.sin(-angle_rad)
    local_x = dx * cos_a - dy * sin_a + cfg.piece_width / 2.0
    local_y = dx * sin_a + dy * cos_a + cfg.piece_height / 2.0
    values = texture_field(local_x, local_y, class_label, mix, cfg)
    values = values + rng.normal(0.0, cfg.noise_sigma, size=values.shape)
    cell[...] = np.clip(values, 0, 255)


def _rotated_quad(
    piece_origin: tuple[float, float], angle_rad: float, cfg: SynthConfig
) -> list[list[float]]:
    w, h = float(cfg.piece_width), float(cfg.piece_height)
    cx = piece_origin[0] + w / 2.0
    cy = piece_origin[1] + h / 2.0
    corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    rot = np.array(
        [[np.cos(angle_rad), -np.sin(angle_rad)], [np.sin(angle_rad), np.cos(angle_rad)]]
    )
    pts = corners @ rot.T + np.array([cx, cy])
    return [[float(x), float(y)] for x, y in pts]


def _piece_mix(index: int, count: int, cfg: SynthConfig) -> float:
    if count == 1:
        return 0.0
    return cfg.mix_max * index / (count - 1)


def write_demo_workspace(out_dir: str | Path, cfg: SynthConfig = SynthConfig()) -> dict[str, Path]:
    """Create sources/, annotations.json, and external_regions.json under out_dir.

    The external file holds unlabeled regions rendered with the *second*
    hand's texture (its first class, light mix), so the expected
    attribution of the held-out material is Author2.
    """
    out_dir = Path(out_dir)
    sources_dir = out_dir / "sources"
    sources_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.master_seed)

    slack = int(np.ceil(cfg.piece_width * abs(np.sin(np.radians(cfg.rotation_deg))))) + cfg.margin
    cell_w = cfg.piece_width + 2 * slack
    cell_h = cfg.piece_height + 2 * slack

    schemes = [
        {
            "id": cfg.scheme_id,
            "n_classes": cfg.n_classes,
            "author_of_class": {
                str(k): v for k, v in canonical_author_map(cfg.n_classes).items()
            },
        }
    ]
    sources = []
    regions = []
    for class_label in range(1, cfg.n_classes + 1):
        image = np.empty((cell_h * cfg.pieces_per_class, cell_w), dtype=np.float64)
        source_id = f"synth-c{class_label}"
        for k in range(cfg.pieces_per_class):
            rotated = cfg.rotate_every > 0 and (k % cfg.rotate_every == cfg.rotate_every - 1)
            angle = np.radians(cfg.rotation_deg) if rotated else 0.0
            cell = image[k * cell_h : (k + 1) * cell_h, :]
            render_piece_cell(
                cell, (float(slack), float(slack)), angle, class_label,
                _piece_mix(k, cfg.pieces_per_class, cfg), rng, cfg,
            )
            quad = _rotated_quad((float(slack), float(k * cell_h + slack)), angle, cfg)
            regions.append(
                {
                    "piece_id": f"c{class_label}-p{k}",
                    "source_id": source_id,
                    "quad": quad,
                    "class_label": class_label,
                    "scheme_id": cfg.scheme_id,
                    "line_pair_index": k,
                }
            )
        path = sources_dir / f"{source_id}.png"
        save_gray(path, np.clip(image, 0, 255).astype(np.uint8))
        sources.append({"id": source_id, "path": f"sources/{source_id}.png"})

    annotations_path = out_dir / "annotations.json"
    annotations_path.write_text(
        json.dumps({"schemes": schemes, "sources": sources, "regions": regions}, indent=2) + "\n"
    )

    # Held-out material written by the second hand.
    external_class = cfg.n_classes // 2 + 1
    n_external = 3
    ext_image = np.empty((cell_h * n_external, cell_w), dtype=np.float64)
    ext_regions = []
    for k in range(n_external):
        cell = ext_image[k * cell_h : (k + 1) * cell_h, :]
        render_piece_cell(cell, (float(slack), float(slack)), 0.0, external_class, 0.1, rng, cfg)
        ext_regions.append(
            {
                "piece_id": f"held-out-p{k}",
                "source_id": "synth-external",
                "quad": _rotated_quad((float(slack), float(k * cell_h + slack)), 0.0, cfg),
                "class_label": None,
                "scheme_id": None,
                "line_pair_index": k,
            }
        )
    ext_path = sources_dir / "synth-external.png"
    save_gray(ext_path, np.clip(ext_image, 0, 255).astype(np.uint8))
    external_path = out_dir / "external_regions.json"
    external_path.write_text(
        json.dumps(
            {
                "schemes": schemes,
                "sources": [{"id": "synth-external", "path": "sources/synth-external.png"}],
                "regions": ext_regions,
            },
            indent=2,
        )
        + "\n"
    )
    return {"annotations": annotations_path, "external": external_path, "sources": sources_dir}


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="Generate a synthetic two-writer workspace.")
    parser.add_argument("out_dir", help="directory to create the workspace in")
    parser.add_argument("--classes", type=int, default=4, choices=(4, 8))
    parser.add_argument("--pieces-per-class", type=int, default=8)
    args = parser.parse_args(argv)
    cfg = SynthConfig(
        scheme_id=f"synth{args.classes}",
        n_classes=args.classes,
        pieces_per_class=args.pieces_per_class,
    )
    paths = write_demo_workspace(args.out_dir, cfg)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
