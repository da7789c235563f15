"""Knowledge-biased recurrent attention detector on a numpy autodiff tape."""

__version__ = "0.1.0"
