/** Slice-plane geometry: pixel (col, row) on an axis slice <-> world mm.
 *
 * Slice images arrive as (rows, cols): z slices are (ny, nx), y slices
 * (nz, nx), x slices (nz, ny). A pixel names the voxel whose center it
 * shows, so pixel -> world -> pixel round-trips exactly and any world
 * point is at most half a voxel from its pixel's center.
 */

export type Axis = "x" | "y" | "z";
export type Vec3 = [number, number, number];

export function sliceShape(dims: Vec3, axis: Axis): { cols: number; rows: number } {
  const [nx, ny, nz] = dims;
  if (axis === "z") return { cols: nx, rows: ny };
  if (axis === "y") return { cols: nx, rows: nz };
  return { cols: ny, rows: nz };
}

export function sliceCount(dims: Vec3, axis: Axis): number {
  const [nx, ny, nz] = dims;
  return axis === "x" ? nx : axis === "y" ? ny : nz;
}

export function clampIndex(dims: Vec3, axis: Axis, index: number): number {
  return Math.min(Math.max(Math.round(index), 0), sliceCount(dims, axis) - 1);
}

export function voxelFromPixel(axis: Axis, index: number, col: number, row: number): Vec3 {
  if (axis === "z") return [col, row, index];
  if (axis === "y") return [col, index, row];
  return [index, col, row];
}

export function pixelFromVoxel(
  axis: Axis, v: Vec3,
): { col: number; row: number; index: number } {
  const [x, y, z] = v;
  if (axis === "z") return { col: x, row: y, index: z };
  if (axis === "y") return { col: x, row: z, index: y };
  return { col: y, row: z, index: x };
}

export function worldFromVoxel(origin: Vec3, spacing: Vec3, v: Vec3): Vec3 {
  return [
    origin[0] + v[0] * spacing[0],
    origin[1] + v[1] * spacing[1],
    origin[2] + v[2] * spacing[2],
  ];
}

export function voxelFromWorld(origin: Vec3, spacing: Vec3, w: Vec3): Vec3 {
  return [
    (w[0] - origin[0]) / spacing[0],
    (w[1] - origin[1]) / spacing[1],
    (w[2] - origin[2]) / spacing[2],
  ];
}

export function worldFromPixel(
  origin: Vec3, spacing: Vec3, axis: Axis, index: number, col: number, row: number,
): Vec3 {
  return worldFromVoxel(origin, spacing, voxelFromPixel(axis, index, col, row));
}

export function pixelFromWorld(
  origin: Vec3, spacing: Vec3, axis: Axis, w: Vec3,
): { col: number; row: number; index: number } {
  const v = voxelFromWorld(origin, spacing, w);
  const p = pixelFromVoxel(axis, [Math.round(v[0]), Math.round(v[1]), Math.round(v[2])]);
  return p;
}
