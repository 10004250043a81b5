"""Void detection in X-ray images of ball grid array solder joints.

Pipeline: locate balls on a board image and cut 64x64 crops
(:mod:`voidseg.extraction`), label crops as void / non-void
(:mod:`voidseg.groundtruth`), augment non-void crops with synthetic voids
(:mod:`voidseg.synth`), train an encoder classifier and then a U-Net
(:mod:`voidseg.segnet`), and post-process and score predictions
(:mod:`voidseg.evaluation`).
"""

__version__ = "0.1.0"
