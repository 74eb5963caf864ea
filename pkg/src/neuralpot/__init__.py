"""Neural-potential toolkit: masked and denoising pretraining for GNN force fields.

Subpackages:
    autodiff  - reverse-mode AD over dense float64 arrays
    geometry  - periodic boxes, minimum image, neighbor lists
    datagen   - classical MD generator with exact force/energy labels
    dataset   - frame persistence, splitting, pretext-sample construction
    models    - energy-centric and force-centric GNN families
    pretext   - masking / denoising / supervised loss functions
    trainer   - AdamW loops, schedules, checkpointing, metrics
    cli       - batch command-line front end
"""

__version__ = "0.1.0"
