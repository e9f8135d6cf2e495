#include "isoray/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "mc_tables.hpp"

namespace isoray {

namespace {

Vec3 interp_vertex(const Vec3& pa, const Vec3& pb, double va, double vb,
                   double tau) {
  // per-edge linear interpolation of the occupancy to the level tau
  const double denom = vb - va;
  double mu = denom == 0.0 ? 0.5 : (tau - va) / denom;
  mu = std::clamp(mu, 0.0, 1.0);
  return pa + mu * (pb - pa);
}

}  // namespace

TriangleMesh extract_iso_mesh_grid(const std::vector<double>& values,
                                   std::size_t nx, std::size_t ny, std::size_t nz,
                                   const Vec3& origin, double spacing, double tau) {
  if (nx < 2 || ny < 2 || nz < 2)
    throw std::invalid_argument("extract_iso_mesh_grid: need at least 2 samples per axis");
  if (values.size() != nx * ny * nz)
    throw std::invalid_argument("extract_iso_mesh_grid: value count mismatch");

  TriangleMesh mesh;
  // weld vertices through a global edge index: lattice point + axis
  std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
  auto lattice = [&](std::size_t x, std::size_t y, std::size_t z) {
    return (z * ny + y) * nx + x;
  };
  auto edge_key = [&](std::size_t x, std::size_t y, std::size_t z, int axis) {
    return static_cast<std::uint64_t>(lattice(x, y, z)) * 3 +
           static_cast<std::uint64_t>(axis);
  };
  auto point_at = [&](std::size_t x, std::size_t y, std::size_t z) {
    return Vec3{origin.x + spacing * static_cast<double>(x),
                origin.y + spacing * static_cast<double>(y),
                origin.z + spacing * static_cast<double>(z)};
  };

  for (std::size_t z = 0; z + 1 < nz; ++z)
    for (std::size_t y = 0; y + 1 < ny; ++y)
      for (std::size_t x = 0; x + 1 < nx; ++x) {
        double corner_val[8];
        std::size_t cx[8], cy[8], cz[8];
        int case_index = 0;
        for (int c = 0; c < 8; ++c) {
          cx[c] = x + static_cast<std::size_t>(mc::kCornerOffset[c][0]);
          cy[c] = y + static_cast<std::size_t>(mc::kCornerOffset[c][1]);
          cz[c] = z + static_cast<std::size_t>(mc::kCornerOffset[c][2]);
          corner_val[c] = values[lattice(cx[c], cy[c], cz[c])];
          if (corner_val[c] < tau) case_index |= 1 << c;
        }
        const int edges = mc::kEdgeTable[case_index];
        if (edges == 0) continue;

        std::uint32_t edge_v[12];
        for (int e = 0; e < 12; ++e) {
          if (!(edges & (1 << e))) continue;
          const int a = mc::kEdgeCorners[e][0];
          const int b = mc::kEdgeCorners[e][1];
          // canonical edge id: lower lattice endpoint + axis
          const bool a_first = lattice(cx[a], cy[a], cz[a]) < lattice(cx[b], cy[b], cz[b]);
          const int lo = a_first ? a : b;
          int axis;
          if (cx[a] != cx[b]) axis = 0;
          else if (cy[a] != cy[b]) axis = 1;
          else axis = 2;
          const std::uint64_t key = edge_key(cx[lo], cy[lo], cz[lo], axis);
          auto it = edge_vertex.find(key);
          if (it != edge_vertex.end()) {
            edge_v[e] = it->second;
          } else {
            const Vec3 p = interp_vertex(point_at(cx[a], cy[a], cz[a]),
                                         point_at(cx[b], cy[b], cz[b]),
                                         corner_val[a], corner_val[b], tau);
            const auto id = static_cast<std::uint32_t>(mesh.vertices.size());
            mesh.vertices.push_back(p);
            edge_vertex.emplace(key, id);
            edge_v[e] = id;
          }
        }
        const int* tri = mc::kTriTable[case_index];
        for (int i = 0; tri[i] != -1; i += 3) {
          const std::uint32_t v0 = edge_v[tri[i]];
          const std::uint32_t v1 = edge_v[tri[i + 1]];
          const std::uint32_t v2 = edge_v[tri[i + 2]];
          if (v0 == v1 || v1 == v2 || v0 == v2) continue;  // degenerate
          mesh.faces.push_back({v0, v1, v2});
        }
      }
  return mesh;
}

TriangleMesh extract_iso_mesh(
    const std::function<std::vector<double>(const Tensor&)>& occ_batch,
    std::size_t resolution, double tau, const GridBounds& bounds) {
  if (resolution < 2)
    throw std::invalid_argument("extract_iso_mesh: resolution must be >= 2");
  const std::size_t r = resolution;
  const double extent = bounds.hi.x - bounds.lo.x;
  if (!(extent > 0.0) || std::abs((bounds.hi.y - bounds.lo.y) - extent) > 1e-12 ||
      std::abs((bounds.hi.z - bounds.lo.z) - extent) > 1e-12)
    throw std::invalid_argument("extract_iso_mesh: bounds must be a cube");
  const double spacing = extent / static_cast<double>(r - 1);

  std::vector<double> values(r * r * r);
  // evaluate plane by plane to bound the batch size
  for (std::size_t z = 0; z < r; ++z) {
    Tensor pts = Tensor::zeros({r * r, 3});
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) {
        const std::size_t i = y * r + x;
        pts.values[3 * i + 0] = bounds.lo.x + spacing * static_cast<double>(x);
        pts.values[3 * i + 1] = bounds.lo.y + spacing * static_cast<double>(y);
        pts.values[3 * i + 2] = bounds.lo.z + spacing * static_cast<double>(z);
      }
    const std::vector<double> occ = occ_batch(pts);
    std::copy(occ.begin(), occ.end(), values.begin() + static_cast<long>(z * r * r));
  }
  return extract_iso_mesh_grid(values, r, r, r, bounds.lo, spacing, tau);
}

TriangleMesh extract_mesh(const MlpField& field, std::size_t resolution,
                          double tau, const GridBounds& bounds, bool with_colors) {
  TriangleMesh mesh = extract_iso_mesh(
      [&](const Tensor& pts) { return field.occupancy(pts); }, resolution, tau,
      bounds);
  if (with_colors && !mesh.vertices.empty()) {
    mesh.colors.resize(mesh.vertices.size());
    const std::size_t chunk = 1u << 16;
    for (std::size_t o = 0; o < mesh.vertices.size(); o += chunk) {
      const std::size_t m = std::min(chunk, mesh.vertices.size() - o);
      Tensor pts = Tensor::zeros({m, 3});
      for (std::size_t i = 0; i < m; ++i) {
        pts.values[3 * i + 0] = mesh.vertices[o + i].x;
        pts.values[3 * i + 1] = mesh.vertices[o + i].y;
        pts.values[3 * i + 2] = mesh.vertices[o + i].z;
      }
      const FieldOutput fo = field.forward(pts);
      for (std::size_t i = 0; i < m; ++i)
        mesh.colors[o + i] = Vec3{fo.rgb.values[3 * i], fo.rgb.values[3 * i + 1],
                                  fo.rgb.values[3 * i + 2]};
    }
  }
  return mesh;
}

bool is_watertight(const TriangleMesh& mesh) {
  if (mesh.faces.empty()) return false;
  std::map<std::pair<std::uint32_t, std::uint32_t>, int> edge_count;
  for (const auto& f : mesh.faces) {
    for (int e = 0; e < 3; ++e) {
      std::uint32_t a = f[static_cast<std::size_t>(e)];
      std::uint32_t b = f[static_cast<std::size_t>((e + 1) % 3)];
      if (a == b) return false;
      if (a > b) std::swap(a, b);
      ++edge_count[{a, b}];
    }
  }
  for (const auto& [edge, count] : edge_count)
    if (count != 2) return false;
  return true;
}

// --- chamfer -------------------------------------------------------------------

namespace {

// flat kd-tree over points, median split
class KdTree {
 public:
  explicit KdTree(const std::vector<Vec3>& pts) : pts_(pts) {
    idx_.resize(pts.size());
    std::iota(idx_.begin(), idx_.end(), 0u);
    nodes_.reserve(2 * pts.size());
    root_ = build(0, pts.size(), 0);
  }

  double nearest_dist(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return std::sqrt(best);
  }

 private:
  struct Node {
    int left = -1, right = -1;
    std::uint32_t point = 0;
    int axis = 0;
  };

  int build(std::size_t lo, std::size_t hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const std::size_t mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + static_cast<long>(lo),
                     idx_.begin() + static_cast<long>(mid),
                     idx_.begin() + static_cast<long>(hi),
                     [&](std::uint32_t a, std::uint32_t b) {
                       return pts_[a][axis] < pts_[b][axis];
                     });
    Node n;
    n.point = idx_[mid];
    n.axis = axis;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(n);
    nodes_[static_cast<std::size_t>(id)].left = build(lo, mid, depth + 1);
    nodes_[static_cast<std::size_t>(id)].right = build(mid + 1, hi, depth + 1);
    return id;
  }

  void search(int id, const Vec3& q, double& best_sq) const {
    if (id < 0) return;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Vec3& p = pts_[n.point];
    const Vec3 d = q - p;
    best_sq = std::min(best_sq, dot(d, d));
    const double delta = q[n.axis] - p[n.axis];
    const int near = delta < 0.0 ? n.left : n.right;
    const int far = delta < 0.0 ? n.right : n.left;
    search(near, q, best_sq);
    if (delta * delta < best_sq) search(far, q, best_sq);
  }

  const std::vector<Vec3>& pts_;
  std::vector<std::uint32_t> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

double mean_nearest(const std::vector<Vec3>& from, const KdTree& to) {
  double s = 0.0;
  for (const Vec3& p : from) s += to.nearest_dist(p);
  return s / static_cast<double>(from.size());
}

}  // namespace

EvalReport chamfer_l1(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("chamfer_l1: point sets must be non-empty");
  KdTree ta(a), tb(b);
  EvalReport r;
  r.accuracy = mean_nearest(a, tb);
  r.completeness = mean_nearest(b, ta);
  r.chamfer_l1 = 0.5 * (r.accuracy + r.completeness);
  return r;
}

double surface_area(const TriangleMesh& mesh) {
  double area = 0.0;
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    area += 0.5 * norm(cross(b - a, c - a));
  }
  return area;
}

std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t count,
                                 CounterRng& rng) {
  if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  std::vector<double> cum(mesh.faces.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    total += 0.5 * norm(cross(mesh.vertices[f[1]] - mesh.vertices[f[0]],
                              mesh.vertices[f[2]] - mesh.vertices[f[0]]));
    cum[i] = total;
  }
  if (!(total > 0.0))
    throw std::invalid_argument("sample_surface: mesh has zero area");

  std::vector<Vec3> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const double pick = rng.next_double() * total;
    const std::size_t fi = static_cast<std::size_t>(
        std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin());
    const auto& f = mesh.faces[std::min(fi, mesh.faces.size() - 1)];
    // uniform barycentric draw
    double u = rng.next_double(), v = rng.next_double();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    out.push_back(a + u * (b - a) + v * (c - a));
  }
  return out;
}

// --- export / import -----------------------------------------------------------

void save_obj(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_obj: cannot open " + path);
  os.precision(10);
  for (const Vec3& v : mesh.vertices)
    os << "v " << v.x << " " << v.y << " " << v.z << "\n";
  for (const auto& f : mesh.faces)
    os << "f " << f[0] + 1 << " " << f[1] + 1 << " " << f[2] + 1 << "\n";
  if (!mesh.colors.empty()) {
    os << "# vertex colors, one per vertex in order\n";
    for (const Vec3& c : mesh.colors)
      os << "# vc " << c.x << " " << c.y << " " << c.z << "\n";
  }
  if (!os) throw std::runtime_error("save_obj: write failed for " + path);
}

TriangleMesh load_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_obj: cannot open " + path);
  TriangleMesh m;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x >> v.y >> v.z))
        throw std::runtime_error(path + ": malformed vertex line");
      m.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<std::uint32_t, 3> f{};
      for (int i = 0; i < 3; ++i) {
        std::string fld;
        if (!(ls >> fld)) throw std::runtime_error(path + ": malformed face line");
        f[static_cast<std::size_t>(i)] =
            static_cast<std::uint32_t>(std::stoul(fld.substr(0, fld.find('/')))) - 1;
      }
      m.faces.push_back(f);
    } else if (tag == "#") {
      std::string sub;
      ls >> sub;
      if (sub == "vc") {
        Vec3 c;
        if (ls >> c.x >> c.y >> c.z) m.colors.push_back(c);
      }
    }
  }
  if (!m.colors.empty() && m.colors.size() != m.vertices.size())
    throw std::runtime_error(path + ": vertex color count mismatch");
  return m;
}

void save_ply(const std::string& path, const TriangleMesh& mesh) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_ply: cannot open " + path);
  const bool colored = !mesh.colors.empty();
  os << "ply\nformat binary_little_endian 1.0\n";
  os << "element vertex " << mesh.vertices.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  if (colored)
    os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "element face " << mesh.faces.size() << "\n";
  os << "property list uchar uint vertex_indices\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const float xyz[3] = {static_cast<float>(mesh.vertices[i].x),
                          static_cast<float>(mesh.vertices[i].y),
                          static_cast<float>(mesh.vertices[i].z)};
    os.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    if (colored) {
      auto q = [](double v) {
        return static_cast<std::uint8_t>(
            std::clamp(std::lround(v * 255.0), 0l, 255l));
      };
      const std::uint8_t rgb[3] = {q(mesh.colors[i].x), q(mesh.colors[i].y),
                                   q(mesh.colors[i].z)};
      os.write(reinterpret_cast<const char*>(rgb), sizeof(rgb));
    }
  }
  for (const auto& f : mesh.faces) {
    const std::uint8_t n = 3;
    os.write(reinterpret_cast<const char*>(&n), 1);
    const std::uint32_t idx[3] = {f[0], f[1], f[2]};
    os.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
  if (!os) throw std::runtime_error("save_ply: write failed for " + path);
}

TriangleMesh load_ply(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_ply: cannot open " + path);
  std::string line;
  std::size_t n_vertices = 0, n_faces = 0;
  bool colored = false;
  if (!std::getline(is, line) || line != "ply")
    throw std::runtime_error(path + ": not a ply file");
  while (std::getline(is, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format" && line.find("binary_little_endian") == std::string::npos)
      throw std::runtime_error(path + ": only binary little-endian ply supported");
    if (tag == "element") {
      std::string what;
      std::size_t n;
      ls >> what >> n;
      if (what == "vertex") n_vertices = n;
      else if (what == "face") n_faces = n;
    }
    if (tag == "property" && line.find("red") != std::string::npos) colored = true;
  }
  TriangleMesh m;
  m.vertices.resize(n_vertices);
  if (colored) m.colors.resize(n_vertices);
  for (std::size_t i = 0; i < n_vertices; ++i) {
    float xyz[3];
    if (!is.read(reinterpret_cast<char*>(xyz), sizeof(xyz)))
      throw std::runtime_error(path + ": truncated vertex data");
    m.vertices[i] = Vec3{xyz[0], xyz[1], xyz[2]};
    if (colored) {
      std::uint8_t rgb[3];
      if (!is.read(reinterpret_cast<char*>(rgb), 3))
        throw std::runtime_error(path + ": truncated color data");
      m.colors[i] = Vec3{rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
    }
  }
  m.faces.resize(n_faces);
  for (std::size_t i = 0; i < n_faces; ++i) {
    std::uint8_t n;
    std::uint32_t idx[3];
    if (!is.read(reinterpret_cast<char*>(&n), 1) || n != 3 ||
        !is.read(reinterpret_cast<char*>(idx), sizeof(idx)))
      throw std::runtime_error(path + ": unsupported face record");
    m.faces[i] = {idx[0], idx[1], idx[2]};
  }
  return m;
}

TriangleMesh load_mesh(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".ply")
    return load_ply(path);
  return load_obj(path);
}

}  // namespace isoray
