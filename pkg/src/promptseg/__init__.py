"""Open-vocabulary shape segmentation at desk scale.

Text prompts drive a frozen promptable mask decoder through a small
trainable language adapter; everything trains and evaluates on a
synthetic compositional shape dataset.
"""

__version__ = "0.1.0"
