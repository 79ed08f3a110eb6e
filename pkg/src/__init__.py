"""
LiDAR-IMU Odometry
Tightly coupled scan-to-map estimation with iterated point-level undistortion
"""
