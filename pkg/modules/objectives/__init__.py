# Objectives module
