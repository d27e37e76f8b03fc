"""Training-free visual evidence retrieval.

Backpropagates an uncertainty objective on the next-token distribution to
visual token embeddings, turns the gradient-norm map into ranked regions,
and iteratively zooms with a spatial-entropy stopping rule.
"""

from .core import (
    BinaryMask,
    Component,
    PixelRect,
    RegionProposal,
    SaliencyGrid,
    TokenGrid,
    View,
    ViewSet,
    compose_rect,
    rect_iou,
    token_bbox_to_pixels,
)
from .objectives import (
    NextTokenSummary,
    ObjectiveConfig,
    entropy_grad_logits,
    max_prob_objective,
    objective_seed,
    shannon_entropy,
    softmax,
    top_p_entropy,
)
from .pipeline import (
    DegenerateMapError,
    ExtractionResult,
    PipelineConfig,
    binarize,
    connected_components,
    elbow_threshold,
    extract_regions,
    gaussian_smooth,
    score_and_rank,
)
from .toy import ToyModel, ToyModelConfig, VisualEmbeddings, GradientField, hash_prompt
from .backends import (
    GradientBackend,
    RemoteBackend,
    StubBackend,
    ToyBackend,
    make_backend,
)
from .protocol import BackendUnavailable, ProtocolError
from .refine import (
    RefineConfig,
    RefinementResult,
    RefinementTrace,
    answer_with_views,
    confidence_stop,
    refine,
    spatial_entropy,
    spatial_entropy_stop,
)
from .imaging import RasterImage, crop, read_pixmap, write_pixmap
from .evaluation import (
    DatasetManifest,
    EvalReport,
    PlantedConfig,
    eval_localization,
    generate_planted,
    load_manifest,
    run_ablation,
)

__version__ = "0.1.0"
