from .dataset import (
    DatasetError,
    DatasetManifest,
    channel_stats,
    filter_oversized,
    load_dataset,
    preprocess,
    write_dataset,
    write_mask_pool,
)
from .priors import (
    MaskPool,
    PriorSampler,
    PriorSpec,
    sample_box_prior,
    sample_pool_prior,
    sample_random_rects,
)
from .scenes import (
    SHAPE_FAMILIES,
    LabeledSample,
    SceneSpec,
    TrainingSample,
    class_histogram,
    generate_corpus,
    generate_scene,
    rasterize_glyph,
)
