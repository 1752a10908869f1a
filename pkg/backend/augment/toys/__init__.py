"""Deterministic toy components: backbone, encoder, detector, discriminator, classifier, scenes."""
