pub mod bell;
pub mod lab;
pub mod limit;
pub mod numeric;
pub mod offspring;
pub mod series;
pub mod sim;
