"""Neural flow surrogate: inputs, U-Net, training, metrics, inference, ablation."""
