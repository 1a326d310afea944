"""Explains a CNN's single-image classification by perturbation analysis.

The pipeline resamples the input with multiplicative Gaussian noise, scores
every (layer, channel) neuron with six importance metrics, picks the top
channels per layer, projects each back to pixel space with a deconvolutional
reverse pass, and cuts the region the reconstruction highlights out of the
original image as an explanation patch.
"""

__version__ = "0.1.0"
