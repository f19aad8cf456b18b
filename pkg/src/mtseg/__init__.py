"""Mean-teacher semi-supervised segmentation with affine consistency noise and
leave-one-group-out data-planning sweeps."""

__version__ = "0.1.0"
