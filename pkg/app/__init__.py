# SLAM engine package
