"""Datasets: codecs, samples, synthetic scenes and manifests."""

from .codecs import DisparityMap, decode_disparity_pfm, decode_disparity_png16, encode_disparity_png16
from .manifest import DatasetManifest, ManifestError, load_manifest, write_synthetic_dataset
from .sample import StereoSample, to_tensors
from .synthetic import SyntheticSceneSpec, generate_synthetic, sparsify
