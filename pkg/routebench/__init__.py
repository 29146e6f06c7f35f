"""
routebench: style-controlled adversarial route generation (RouteGAN) and a closed-loop harness for
measuring how often tested planners collide with it.
"""

__version__ = "0.1.0"
