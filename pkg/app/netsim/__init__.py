# Empty init files for Python packages
