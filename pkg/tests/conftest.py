from __future__ import annotations

import pytest

from writerid.annotations import extract_piece, load_annotations
from writerid.augment import AugmentationParams
from writerid.synthesis import SynthConfig, write_demo_workspace

# Light augmentation for fixture runs: shine + mild zoom, no shifts.
LIGHT_PARAMS = AugmentationParams(
    shine_factors=(0.9, 1.0, 1.1),
    shift_offsets_h=(0,),
    shift_offsets_v=(0,),
    zoom_factors=(0.95, 1.0, 1.05),
)


@pytest.fixture(scope="session")
def synth_workspace(tmp_path_factory):
    """One synthetic two-writer workspace shared across the session."""
    root = tmp_path_factory.mktemp("synthws")
    cfg = SynthConfig()
    paths = write_demo_workspace(root, cfg)
    return {"cfg": cfg, "root": root, **paths}


@pytest.fixture(scope="session")
def synth_annotations(synth_workspace):
    return load_annotations(synth_workspace["annotations"])


@pytest.fixture(scope="session")
def synth_pieces(synth_workspace, synth_annotations):
    cfg = synth_workspace["cfg"]
    return [
        extract_piece(synth_annotations.sources[r.source_id], r)
        for r in synth_annotations.regions
        if r.scheme_id == cfg.scheme_id
    ]


@pytest.fixture(scope="session")
def synth_external_pieces(synth_workspace):
    aset = load_annotations(synth_workspace["external"], allow_unlabeled=True)
    return [extract_piece(aset.sources[r.source_id], r) for r in aset.regions]
