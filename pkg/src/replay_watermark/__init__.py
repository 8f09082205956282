"""Physical watermarking for replay-attack detection in linear Gaussian systems."""
