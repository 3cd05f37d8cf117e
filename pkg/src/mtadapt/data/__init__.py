from .dataset import (
    DISJOINT_BALANCE,
    DISJOINT_NORMAL,
    FULL,
    DatasetSetting,
    ExternalDatasetLoader,
    PartialDataset,
    load_dataset,
    save_dataset,
    split_setting,
)
from .synthetic import (
    GROUND_TRUTH,
    PSEUDO,
    ImageSample,
    SceneLayout,
    SceneObject,
    SceneSpec,
    class_vocabulary,
    generate_scene,
    generate_scenes,
    object_footprint,
    rasterize,
    sample_layout,
)
