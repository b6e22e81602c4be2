"""Writer-attribution toolkit for annotated document images.

Pipeline: annotated source images -> de-rotated sentence pieces -> seeded
train/test split -> augmentation -> square tiles -> pluggable classifier
runs -> confusion-matrix similarity -> 2-step majority-vote attribution.
"""

from .annotations import (
    AUTHOR1,
    AUTHOR2,
    ClassScheme,
    PieceImage,
    RegionAnnotation,
    SourceImage,
    extract_piece,
    load_annotations,
)
from .augment import AugmentationChain, AugmentationParams, augment_piece
from .datasets import (
    DATASET_FAMILIES,
    DatasetSpec,
    ExternalTileSet,
    TileDataset,
    TileSample,
    build_dataset,
    build_external_set,
    compute_tile_size,
    split_pieces,
    tile,
)
from .errors import AnnotationParseError, BackendError, ValidationError
from .harness import (
    BASELINE_MODEL_ID,
    DEFAULT_SEEDS,
    LossCurve,
    PredictionRecord,
    RunManifest,
    TrainingConfig,
    assess_convergence,
    invoke_external_backend,
    run_baseline,
    softmax,
    top_class,
)
from .similarity import (
    ConfusionMatrix,
    RelationThresholds,
    SimilarityReport,
    confusion_matrix,
    similarity4,
    similarity8,
    similarity_report,
    sum_matrices,
)
from .voting import RunVerdict, VoteTally, majority_vote, run_verdict, score_external

__version__ = "0.1.0"
