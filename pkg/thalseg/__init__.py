"""thalseg: thalamic nuclei segmentation from structural MRI."""
__version__ = "0.1.0"
