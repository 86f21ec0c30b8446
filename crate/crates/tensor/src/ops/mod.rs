mod conv;
mod elementwise;
mod pool;
mod sample;
mod shape;
mod softmax;
