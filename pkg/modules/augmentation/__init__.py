# Augmentation module
