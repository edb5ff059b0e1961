from .ops import bilinear_resample, crop_to, flip_sample, pair_images, to_multilabel
from .raster import Annotation, RasterRecord, read_raster, write_raster
from .store import Dataset, Sample, compute_norm_stats, load_dataset, pair_stores, read_manifest, write_store
from .synth import SynthConfig, synth_generate, write_synthetic

__all__ = [
    "Annotation",
    "Dataset",
    "RasterRecord",
    "Sample",
    "SynthConfig",
    "bilinear_resample",
    "compute_norm_stats",
    "crop_to",
    "flip_sample",
    "load_dataset",
    "pair_images",
    "pair_stores",
    "read_manifest",
    "read_raster",
    "synth_generate",
    "to_multilabel",
    "write_raster",
    "write_store",
    "write_synthetic",
]
