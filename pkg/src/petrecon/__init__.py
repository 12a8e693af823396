"""petrecon: desk-scale low-dose PET restoration on synthetic phantoms."""

__version__ = "0.1.0"
