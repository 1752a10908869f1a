"""Day-to-night translation, curation and evaluation for pedestrian detection."""
