"""Search-query-enhanced CTR prediction with diffusion-augmented contrastive alignment."""
