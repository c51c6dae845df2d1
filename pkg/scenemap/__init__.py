from scenemap.version import __version__
