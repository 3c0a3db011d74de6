"""State-space decomposition, regime switching and common-factor tools."""
