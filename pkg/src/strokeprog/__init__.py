"""Stroke outcome prediction from ADC diffusion MRI.

End-to-end pipeline: NIfTI ingestion, trilinear resampling, threshold-based
lesion volumetrics, frozen 3D CNN embeddings, PCA-SVM fusion with Platt
calibration, grouped-stratified cross-validation, and paired signed-rank
comparison of imaging time points.
"""

__version__ = "0.1.0"

from .errors import PipelineError, ValidationError

__all__ = ["PipelineError", "ValidationError", "__version__"]
