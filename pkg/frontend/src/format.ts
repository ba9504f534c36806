/** Display formatting. Pure functions of service responses, so tests can
 * assert that what the page shows is exactly what the service sent. */

import type { Vec3 } from "./geometry.js";

export function fmt3(v: Vec3, digits = 3): string {
  return v.map((x) => x.toFixed(digits)).join(", ");
}

export function fmtLatency(us: number): string {
  return `${us.toFixed(0)} us`;
}
