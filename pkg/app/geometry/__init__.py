# Camera and Lie group geometry
