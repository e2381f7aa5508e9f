# Hybrid Bayesian experimental design with AD-EKI - source package
