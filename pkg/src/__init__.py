"""
SFE Lab
=======

Adversarial example detection and re-identification for MNIST classifiers
with a salient feature extractor (SFE): two coupled generators split the
classifier's features into salient (SF) and trivial (TF) parts, a detector
(AdvD) flags adversarial inputs from the pair, and the salient part alone
restores the correct label.

Modules:
    - layers, network, losses, optimizer: numpy neural-network core
    - checkpoint: SFEL tensor container
    - mnist_loader, pairs: datasets and benign/adversarial pairs
    - classifier: CNN1/CNN2 targeted models
    - attacks: white-box and black-box adversarial attacks
    - sfe: coupled-GAN salient feature extractor
    - detector: AdvD
    - evaluation, saver: metrics, protocols and reports
    - config, pipeline, main: configuration, cached pipeline, CLI
"""

__version__ = '0.1.0'
