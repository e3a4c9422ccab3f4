"""Radar-inertial odometry with self-supervised landmark extraction.

Modules:

- ``tensor``: small reverse-mode autodiff on numpy arrays
- ``preintegration``: IMU pre-integration and the bias regressor
- ``simulator``: synthetic radar/IMU sequences with ground truth
- ``fusion``: soft masks and rotation transport between frames
- ``extractor``: the landmark network, detection and association
- ``velocity``: Doppler ego-velocity and RANSAC
- ``losses``: the self-supervised training objective
- ``pipeline``: training and odometry
- ``evaluation``: trajectory and map metrics
- ``cli``: the ``rasio`` command
"""

__version__ = "0.1.0"
