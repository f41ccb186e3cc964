"""Building blocks of the re-identification pipeline: tensors and autodiff, attention units,
the two-branch network, losses, optimisation, evaluation, data plumbing and configuration."""
