"""Independent reference implementations used to cross-check the library."""
